//! Software rights table standing in for the PKRU register.
//!
//! Each thread keeps its own map from (domain, key, generation) to rights,
//! mirroring the thread-locality of the hardware register. A key the thread
//! never received rights for defaults to NoAccess, like a key allocated by
//! some other thread on real hardware. Generations keep entries from a
//! freed-and-reallocated key id from leaking into the new key.

use std::cell::RefCell;
use std::collections::HashMap;

use super::AccessRights;

thread_local! {
    static THREAD_RIGHTS: RefCell<HashMap<(u64, u8, u64), AccessRights>> =
        RefCell::new(HashMap::new());
}

pub(super) fn thread_rights(domain: u64, key_id: u8, generation: u64) -> AccessRights {
    THREAD_RIGHTS.with(|map| {
        map.borrow()
            .get(&(domain, key_id, generation))
            .copied()
            .unwrap_or(AccessRights::NoAccess)
    })
}

pub(super) fn set_thread_rights(domain: u64, key_id: u8, generation: u64, rights: AccessRights) {
    THREAD_RIGHTS.with(|map| {
        map.borrow_mut().insert((domain, key_id, generation), rights);
    });
}
