//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`) and enforcing its runtime
//! budget. Tests serialize through a mutex so timing-sensitive checks are
//! not disturbed by parallel test threads.

use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use mpklink::codec::{self, Envelope, Payload};
use mpklink::identity::{CaRegistry, InvalidReason};
use mpklink::mpk::{
    create_pair, LaneDir, MpkChannelConfig, RightsPolicy, TraceAction,
};
use mpklink::protection::{
    hardware_supported, tag_region, AccessMode, AccessRights, BackendChoice, PageBuffer,
    ProbeOutcome, ProtectionDomain, RegisterSlot,
};
use mpklink::transport::{
    open_channel, Channel, ChannelConfig, ChannelError, MitmChannel, Role, TransportKind,
};
use mpklink::wordcount::{
    generate_corpus, request_count, run_client, run_server, AuditReason, ServerAudit,
};
use mpklink_bench::records::median;
use mpklink_bench::{export_csv, import_csv, run_sweep, summarize, SweepPlan, REFERENCE_TABLE};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serialize the criteria; they time things.
fn exclusive() -> MutexGuard<'static, ()> {
    static GATE: OnceLock<Mutex<()>> = OnceLock::new();
    GATE.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    started: Instant,
}

impl Criterion {
    fn start(name: &'static str, budget: Duration) -> Self {
        Criterion { name, budget, started: Instant::now() }
    }

    fn check(&self, ok: bool, detail: &str) {
        if !ok {
            println!("[acceptance] {}: FAIL ({detail})", self.name);
            panic!("acceptance criterion '{}' failed: {detail}", self.name);
        }
    }

    fn finish(self) {
        let elapsed = self.started.elapsed();
        let within = elapsed <= self.budget;
        println!(
            "[acceptance] {}: {} ({elapsed:.2?}, budget {:?})",
            self.name,
            if within { "PASS" } else { "FAIL" },
            self.budget
        );
        assert!(within, "'{}' exceeded its runtime budget: {elapsed:?}", self.name);
    }
}

fn random_envelope(rng: &mut ChaCha8Rng, max_payload: usize) -> Envelope {
    let mut sender = [0u8; 16];
    rng.fill_bytes(&mut sender);
    let len = rng.gen_range(0..=max_payload);
    let mut payload = vec![0u8; len];
    rng.fill_bytes(&mut payload);
    let mut e = Envelope::new(sender, rng.next_u64(), payload);
    if rng.gen_bool(0.5) {
        let mut sig = [0u8; 64];
        rng.fill_bytes(&mut sig);
        e.signature = Some(sig);
    }
    e
}

#[test]
fn criterion_codec_round_trip() {
    let _gate = exclusive();
    let c = Criterion::start("codec round-trip and fuzz safety", Duration::from_secs(30));
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);

    for i in 0..10_000 {
        let e = random_envelope(&mut rng, 2048);
        let bytes = codec::encode(&e).unwrap();
        let back = codec::decode(&bytes);
        c.check(back.as_ref() == Ok(&e), &format!("round-trip mismatch at envelope {i}"));
    }

    // fuzzed malformed inputs: random bytes, truncations, oversized length
    // prefixes, and trailing garbage — decode must error or reproduce a
    // valid envelope, and never inspect bytes past the declared length
    for i in 0..2_000 {
        let len = rng.gen_range(0..256);
        let mut junk = vec![0u8; len];
        rng.fill_bytes(&mut junk);
        let _ = codec::decode(&junk); // any Result is fine; no panic, no overread

        let valid = codec::encode(&random_envelope(&mut rng, 64)).unwrap();
        let cut = rng.gen_range(0..valid.len());
        c.check(
            codec::decode(&valid[..cut]).is_err(),
            &format!("truncated frame accepted at {i}"),
        );
        let mut extended = valid.clone();
        extended.push(rng.gen());
        c.check(
            matches!(codec::decode(&extended), Err(codec::CodecError::Malformed(_))),
            "trailing bytes accepted",
        );
        let mut inflated = valid;
        inflated[0..4].copy_from_slice(&u32::MAX.to_be_bytes());
        c.check(
            matches!(codec::decode(&inflated), Err(codec::CodecError::Truncated { .. })),
            "length prefix beyond buffer accepted",
        );
    }
    c.finish();
}

fn probe_matrix(domain: &ProtectionDomain, c: &Criterion) {
    let key = domain.allocate_key().unwrap();
    let region = tag_region(PageBuffer::with_at_least(1).unwrap(), &key).unwrap();
    let cases = [
        (AccessRights::ReadWrite, AccessMode::Read, ProbeOutcome::Allowed),
        (AccessRights::ReadWrite, AccessMode::Write, ProbeOutcome::Allowed),
        (AccessRights::ReadOnly, AccessMode::Read, ProbeOutcome::Allowed),
        (AccessRights::ReadOnly, AccessMode::Write, ProbeOutcome::AccessViolation),
        (AccessRights::NoAccess, AccessMode::Read, ProbeOutcome::AccessViolation),
        (AccessRights::NoAccess, AccessMode::Write, ProbeOutcome::AccessViolation),
    ];
    for (rights, mode, expected) in cases {
        key.set_rights(rights).unwrap();
        let got = region.probe(0, mode).unwrap();
        c.check(
            got == expected,
            &format!("{:?} backend, {rights:?} + {mode:?}: got {got:?}", domain.backend()),
        );
        let predicted = domain.read_register().rights(key.key_id()).permits(mode);
        c.check(
            predicted == (expected == ProbeOutcome::Allowed),
            "probe disagrees with register prediction",
        );
    }
}

#[test]
fn criterion_protection_semantics() {
    let _gate = exclusive();
    let c = Criterion::start("protection semantics", Duration::from_secs(60));

    probe_matrix(&ProtectionDomain::new(BackendChoice::Emulated).unwrap(), &c);
    if hardware_supported() {
        probe_matrix(&ProtectionDomain::new(BackendChoice::Hardware).unwrap(), &c);
    } else {
        println!("[acceptance] protection semantics: hardware suite SKIPPED (no pkey support on this host)");
    }

    // thread-locality and publish/adopt round-trip, 2 threads, 1000 iterations
    let domain = ProtectionDomain::new(BackendChoice::Emulated).unwrap();
    let key = domain.allocate_key().unwrap();
    let slot = std::sync::Arc::new(RegisterSlot::new());
    let barrier = std::sync::Arc::new(std::sync::Barrier::new(2));
    let key_id = key.key_id();

    let publisher = {
        let (key, domain, slot, barrier) =
            (key.clone(), domain.clone(), slot.clone(), barrier.clone());
        std::thread::spawn(move || {
            for i in 0..1000u32 {
                let rights =
                    if i % 2 == 0 { AccessRights::NoAccess } else { AccessRights::ReadOnly };
                key.set_rights(rights).unwrap();
                slot.publish(&domain.read_register());
                barrier.wait();
                barrier.wait();
                assert_eq!(domain.read_register().rights(key_id), rights);
            }
        })
    };
    let adopter = {
        let (domain, slot, barrier) = (domain.clone(), slot.clone(), barrier.clone());
        std::thread::spawn(move || {
            for i in 0..1000u32 {
                barrier.wait();
                let expected =
                    if i % 2 == 0 { AccessRights::NoAccess } else { AccessRights::ReadOnly };
                // the adopting thread's own register changes...
                let adopted = domain.adopt_register(&slot).unwrap();
                assert_eq!(adopted.rights(key_id), expected);
                // ...then diverges again without affecting the publisher
                domain.read_register();
                barrier.wait();
            }
        })
    };
    c.check(publisher.join().is_ok(), "publisher thread panicked");
    c.check(adopter.join().is_ok(), "adopter thread panicked");
    c.finish();
}

/// Spawn a word-count echo server for one client session over a
/// filesystem transport, run `client` against it, and return its output.
fn with_server<T>(
    kind: TransportKind,
    base: &Path,
    buffer_capacity: usize,
    registry: &CaRegistry,
    signed: bool,
    audit: &ServerAudit,
    client: impl FnOnce(&mut dyn Channel) -> T,
) -> T {
    let server_cfg =
        ChannelConfig::new(kind, Role::Server, base).with_buffer_capacity(buffer_capacity);
    let client_cfg =
        ChannelConfig::new(kind, Role::Client, base).with_buffer_capacity(buffer_capacity);
    std::thread::scope(|scope| {
        let pre_opened = match kind {
            TransportKind::Fifo => None,
            _ => Some(open_channel(&server_cfg).unwrap()),
        };
        scope.spawn(move || {
            let mut ch = match pre_opened {
                Some(ch) => ch,
                None => open_channel(&server_cfg).unwrap(),
            };
            let _ = run_server(ch.as_mut(), registry, signed, audit);
        });
        let mut ch = open_channel(&client_cfg).unwrap();
        let out = client(ch.as_mut());
        let _ = ch.close();
        out
    })
}

#[test]
fn criterion_transport_equivalence() {
    let _gate = exclusive();
    let c = Criterion::start("transport equivalence", Duration::from_secs(300));
    let dir = tempfile::tempdir().unwrap();
    let registry = CaRegistry::new();
    let identity = registry.register("acceptance-client");
    let audit = ServerAudit::new();
    let shm_capacity = ChannelConfig::DEFAULT_BUFFER_CAPACITY; // 1 MiB baseline

    for n in [100u64, 1_000, 10_000, 100_000, 1_000_000] {
        let corpus = dir.path().join(format!("corpus-{n}.txt"));
        generate_corpus(n, 42, &corpus).unwrap();
        let file_len = std::fs::metadata(&corpus).unwrap().len() as usize;
        // unsigned count-request frame: 4 prefix + 30 header + 1 tag + text
        let framed = file_len + 35;

        for kind in [TransportKind::Fifo, TransportKind::Uds, TransportKind::Shm] {
            let base = dir.path().join(format!("{}-{n}", kind.as_str()));
            let result = with_server(kind, &base, shm_capacity, &registry, false, &audit, |ch| {
                run_client(ch, &identity, &corpus, false)
            });
            if kind == TransportKind::Shm && framed > shm_capacity - 8 {
                let message_too_large = matches!(
                    result,
                    Err(mpklink::wordcount::WordcountError::Transport(
                        ChannelError::MessageTooLarge { .. }
                    ))
                );
                c.check(
                    message_too_large,
                    &format!("shm at n={n} ({framed}B framed) should exceed its buffer"),
                );
            } else {
                c.check(
                    result.as_ref().ok() == Some(&n),
                    &format!("{kind} at n={n}: got {result:?}"),
                );
            }
        }

        // the protection-key channel carries every size, including the ones
        // the shm baseline cannot
        let cfg = MpkChannelConfig { backend: BackendChoice::Emulated, ..Default::default() };
        let (mut client_ep, mut server_ep) = create_pair(&cfg).unwrap();
        let count = std::thread::scope(|scope| {
            scope.spawn(|| {
                let _ = run_server(&mut server_ep, &registry, false, &audit);
            });
            let count = run_client(&mut client_ep, &identity, &corpus, false).unwrap();
            client_ep.close().unwrap();
            count
        });
        c.check(count == n, &format!("mpk at n={n}: got {count}"));
    }
    c.finish();
}

#[test]
fn criterion_mpk_isolation() {
    let _gate = exclusive();
    let c = Criterion::start("mpk isolation", Duration::from_secs(30));

    let mut backends = vec![BackendChoice::Emulated];
    if hardware_supported() {
        backends.push(BackendChoice::Hardware);
    } else {
        println!("[acceptance] mpk isolation: hardware variant SKIPPED (no pkey support on this host)");
    }

    for backend in backends {
        // quiescent-point probes under the strict policy
        let cfg = MpkChannelConfig {
            policy: RightsPolicy::Strict,
            backend,
            ..Default::default()
        };
        let (mut client, mut server) = create_pair(&cfg).unwrap();
        let probes = [
            client.outbound_probe(),
            client.inbound_probe(),
            server.outbound_probe(),
            server.inbound_probe(),
        ];
        let (client_done, server_done) = std::thread::scope(|scope| {
            let server_probe_results = scope.spawn(move || {
                let e = server.recv().unwrap();
                server.send(&e).unwrap();
                // the server endpoint thread probes at quiescence
                let results: Vec<_> = [server.outbound_probe(), server.inbound_probe()]
                    .iter()
                    .flat_map(|p| {
                        [p.probe(0, AccessMode::Read).unwrap(), p.probe(0, AccessMode::Write).unwrap()]
                    })
                    .collect();
                (server, results)
            });
            client.send(&Envelope::new([1; 16], 0, vec![7; 100])).unwrap();
            client.recv().unwrap();
            let client_results: Vec<_> = [client.outbound_probe(), client.inbound_probe()]
                .iter()
                .flat_map(|p| {
                    [p.probe(0, AccessMode::Read).unwrap(), p.probe(0, AccessMode::Write).unwrap()]
                })
                .collect();
            let (server, server_results) = server_probe_results.join().unwrap();
            drop(server);
            (client_results, server_results)
        });
        for outcome in client_done.iter().chain(server_done.iter()) {
            c.check(
                *outcome == ProbeOutcome::AccessViolation,
                &format!("{backend:?}: endpoint thread reached a quiescent lane buffer"),
            );
        }
        // a third thread is denied on both lane buffers
        std::thread::scope(|scope| {
            scope.spawn(|| {
                for probe in &probes {
                    for mode in [AccessMode::Read, AccessMode::Write] {
                        assert_eq!(
                            probe.probe(0, mode).unwrap(),
                            ProbeOutcome::AccessViolation,
                            "third thread gained access"
                        );
                    }
                }
            });
        });
        drop(client);
    }

    // a 3-chunk strict send performs exactly 3 raise/lower pairs
    let cfg = MpkChannelConfig {
        buffer_bytes: 4096,
        chunk_capacity: 4096,
        policy: RightsPolicy::Strict,
        backend: BackendChoice::Emulated,
        trace: true,
        ..Default::default()
    };
    let (mut client, mut server) = create_pair(&cfg).unwrap();
    let payload = vec![3u8; 2 * 4096 + 100]; // frame spans 3 chunks
    std::thread::scope(|scope| {
        scope.spawn(move || {
            let _ = server.recv().unwrap();
        });
        client.send(&Envelope::new([1; 16], 0, payload)).unwrap();
    });
    let trace = client.rights_trace().unwrap();
    let raises = trace
        .iter()
        .filter(|r| r.lane == LaneDir::Outbound && r.action == TraceAction::Raise)
        .count();
    let lowers = trace
        .iter()
        .filter(|r| r.lane == LaneDir::Outbound && r.action == TraceAction::Lower)
        .count();
    c.check(
        raises == 3 && lowers == 3,
        &format!("expected 3 raise/lower pairs, got {raises}/{lowers}"),
    );
    c.finish();
}

#[test]
fn criterion_tamper_detection() {
    let _gate = exclusive();
    let c = Criterion::start("tamper detection", Duration::from_secs(30));
    let dir = tempfile::tempdir().unwrap();
    let registry = CaRegistry::new();
    let identity = registry.register("tamper-client");
    let mut rng = ChaCha8Rng::seed_from_u64(0x7A3B);

    // phase 1: 100 single-bit mutations on signed traffic
    let audit = ServerAudit::new();
    let base = dir.path().join("tampered");
    with_server(TransportKind::Uds, &base, 1 << 20, &registry, true, &audit, |ch| {
        // the mitm hook flips one randomly chosen payload bit per message
        let bit = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let bit_in_hook = bit.clone();
        let inner = ReborrowChannel(ch);
        let mut mitm = MitmChannel::new(Box::new(inner), move |envelope| {
            let b = bit_in_hook.load(std::sync::atomic::Ordering::Relaxed)
                % (envelope.payload.len() * 8);
            envelope.payload[b / 8] ^= 1 << (b % 8);
        });
        for seq in 0..100u64 {
            let text = format!("message {seq} with a handful of words");
            let payload = Payload::CountRequest { text: text.into_bytes() };
            let envelope = identity
                .sign_envelope(Envelope::with_payload(identity.service_id(), seq, &payload))
                .unwrap();
            bit.store(rng.gen_range(0..envelope.payload.len() * 8), std::sync::atomic::Ordering::Relaxed);
            mitm.send(&envelope).unwrap();
        }
    });
    c.check(audit.served() == 0, &format!("{} tampered requests were processed", audit.served()));
    let records = audit.records();
    c.check(records.len() == 100, &format!("expected 100 audit records, got {}", records.len()));
    c.check(
        records
            .iter()
            .all(|r| r.reason == AuditReason::Signature(InvalidReason::BadSignature)),
        "audit records carry the wrong reason",
    );

    // phase 2: 100 untampered signed requests all succeed
    let audit = ServerAudit::new();
    let base = dir.path().join("clean");
    with_server(TransportKind::Uds, &base, 1 << 20, &registry, true, &audit, |ch| {
        for seq in 0..100u64 {
            let text = format!("message {seq} with a handful of words");
            let expected = mpklink::wordcount::count_words(&text);
            let (count, _) = request_count(ch, &identity, &text, true, seq).unwrap();
            assert_eq!(count, expected, "clean request {seq} miscounted");
        }
    });
    c.check(audit.served() == 100, &format!("served {} of 100 clean requests", audit.served()));
    c.check(audit.rejected() == 0, "clean requests were rejected");
    c.finish();
}

/// Adapter so a `&mut dyn Channel` can be wrapped by the owning
/// [`MitmChannel`] within a scope.
struct ReborrowChannel<'a>(&'a mut dyn Channel);

impl Channel for ReborrowChannel<'_> {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        self.0.send(envelope)
    }
    fn recv(&mut self) -> Result<Envelope, ChannelError> {
        self.0.recv()
    }
    fn close(&mut self) -> Result<(), ChannelError> {
        self.0.close()
    }
}

#[test]
fn criterion_benchmark_properties() {
    let _gate = exclusive();
    let c = Criterion::start("benchmark properties", Duration::from_secs(600));
    let dir = tempfile::tempdir().unwrap();
    let mut all_records = Vec::new();

    // scaling sanity: per transport, median at 10^6 words strictly exceeds
    // the median at 10^2 over 5 trials
    let mut plan = SweepPlan::new(dir.path().join("scaling"));
    plan.counts = vec![100, 1_000_000];
    plan.trials = 5;
    plan.backend = BackendChoice::Emulated;
    plan.buffer_capacity = 16 << 20; // let the shm baseline carry 10^6 words
    let records = run_sweep(&plan).unwrap();
    c.check(
        records.iter().all(|r| r.outcome.is_ok()),
        &format!("scaling sweep had failures: {records:?}"),
    );
    for kind in [TransportKind::Fifo, TransportKind::Uds, TransportKind::Shm, TransportKind::Mpk] {
        let med = |n: u64| {
            let samples: Vec<f64> = records
                .iter()
                .filter(|r| r.transport == kind && r.n_words == n && r.outcome.is_ok())
                .map(|r| r.elapsed_s)
                .collect();
            median(&samples).unwrap()
        };
        let (small, large) = (med(100), med(1_000_000));
        c.check(
            large > small,
            &format!("{kind}: median at 10^6 ({large}) not above median at 10^2 ({small})"),
        );
    }
    all_records.extend(records);

    // policy overhead: strict medians >= relaxed medians at every n.
    // Runs are interleaved (strict, relaxed, strict, ...) so machine drift
    // hits both policies equally, and the counts keep requests single-chunk
    // where the per-chunk rights synchronization dominates the exchange.
    let policy_counts = [100u64, 1_000];
    let mut samples: std::collections::BTreeMap<(RightsPolicy, u64), Vec<f64>> =
        std::collections::BTreeMap::new();
    for _round in 0..5 {
        for policy in [RightsPolicy::Strict, RightsPolicy::Relaxed] {
            let mut plan = SweepPlan::new(dir.path().join("policy"));
            plan.counts = policy_counts.to_vec();
            plan.transports = vec![TransportKind::Mpk];
            plan.trials = 8;
            plan.policy = policy;
            plan.backend = BackendChoice::Emulated;
            plan.poll_interval = Duration::from_micros(5);
            let records = run_sweep(&plan).unwrap();
            for r in &records {
                c.check(r.outcome.is_ok(), &format!("policy sweep failure: {r:?}"));
                samples.entry((policy, r.n_words)).or_default().push(r.elapsed_s);
            }
            all_records.extend(records);
        }
    }
    for &n in &policy_counts {
        let strict = median(&samples[&(RightsPolicy::Strict, n)]).unwrap();
        let relaxed = median(&samples[&(RightsPolicy::Relaxed, n)]).unwrap();
        c.check(
            strict >= relaxed,
            &format!("strict median {strict} below relaxed median {relaxed} at n={n}"),
        );
        println!(
            "[acceptance]   policy overhead at n={n}: strict {strict:.6}s vs relaxed {relaxed:.6}s"
        );
    }

    // the summary renders the reference column verbatim beside local results
    let rendered = summarize(&all_records).render();
    for (_, mpk_ref, other_ref, name) in REFERENCE_TABLE {
        c.check(rendered.contains(mpk_ref), &format!("reference value {mpk_ref} missing"));
        c.check(rendered.contains(other_ref), &format!("reference value {other_ref} missing"));
        c.check(rendered.contains(name), &format!("reference label {name} missing"));
    }
    c.check(rendered.contains("this machine"), "local-results label missing");
    c.check(
        rendered.contains("mpk[strict]") && rendered.contains("mpk[relaxed]"),
        "local mpk medians missing from the summary",
    );

    // CSV round-trip: export -> import of the sweep's records is lossless
    let csv_path = dir.path().join("acceptance.csv");
    export_csv(&all_records, &csv_path).unwrap();
    let reimported = import_csv(&csv_path).unwrap();
    c.check(reimported == all_records, "csv round-trip altered the records");

    c.finish();
}

#[test]
fn criterion_csv_round_trip() {
    let _gate = exclusive();
    let c = Criterion::start("csv round-trip", Duration::from_secs(30));
    let dir = tempfile::tempdir().unwrap();

    // a sweep that produces both successes and per-cell errors
    let mut plan = SweepPlan::new(dir.path().join("work"));
    plan.counts = vec![100, 100_000];
    plan.transports = vec![TransportKind::Shm, TransportKind::Uds];
    plan.trials = 2;
    plan.buffer_capacity = 4096; // forces MessageTooLarge at 100k over shm
    plan.backend = BackendChoice::Emulated;
    let records = run_sweep(&plan).unwrap();
    c.check(
        records.iter().any(|r| !r.outcome.is_ok()),
        "expected at least one error outcome in this plan",
    );
    c.check(
        records.iter().any(|r| r.outcome.is_ok()),
        "expected at least one success in this plan",
    );

    let path = dir.path().join("records.csv");
    export_csv(&records, &path).unwrap();
    let reimported = import_csv(&path).unwrap();
    c.check(reimported == records, "records changed across export/import");
    c.finish();
}
