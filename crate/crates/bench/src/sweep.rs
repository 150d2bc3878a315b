//! Sweep orchestration: one server and one client execution context per
//! trial, strictly sequential trials, per-trial deadline.
//!
//! Timing covers the complete request — building and (optionally) signing
//! the envelope, transmitting it, the server's word count, and receipt of
//! the response — measured inside the client worker. Corpus generation,
//! channel setup, and server startup stay outside the timed window. The
//! first run of every cell is an unrecorded warm-up.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use mpklink::identity::CaRegistry;
use mpklink::mpk::{create_pair, MpkChannelConfig, RightsPolicy};
use mpklink::protection::{page_size, BackendChoice};
use mpklink::transport::{
    open_channel, Channel, ChannelConfig, ChannelError, Role, TransportKind,
};
use mpklink::wordcount::{generate_corpus, request_count, run_server, ServerAudit, WordcountError};

use crate::records::{BenchRecord, Outcome};
use crate::BenchError;

/// The word-count grid of the reference experiment.
pub const FULL_GRID: [u64; 7] =
    [100, 1_000, 10_000, 100_000, 1_000_000, 10_000_000, 100_000_000];

/// Counts at and above this run only when the plan enables `full`.
pub const FULL_ONLY_THRESHOLD: u64 = 10_000_000;

/// Everything a sweep needs; the CLI flags map onto these fields.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub counts: Vec<u64>,
    pub transports: Vec<TransportKind>,
    /// Recorded trials per cell; one extra warm-up runs first.
    pub trials: u32,
    pub seed: u64,
    pub trial_deadline: Duration,
    pub signed: bool,
    pub policy: RightsPolicy,
    pub backend: BackendChoice,
    /// Shared-memory transport region size.
    pub buffer_capacity: usize,
    /// Protection-key channel chunk size.
    pub chunk_capacity: usize,
    pub poll_interval: Duration,
    /// Scratch directory for corpora and channel endpoints.
    pub workdir: PathBuf,
    /// Unlock the 10^7 and 10^8 cells.
    pub full: bool,
}

impl SweepPlan {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        SweepPlan {
            counts: FULL_GRID.to_vec(),
            transports: vec![
                TransportKind::Fifo,
                TransportKind::Uds,
                TransportKind::Shm,
                TransportKind::Mpk,
            ],
            trials: 5,
            seed: 42,
            trial_deadline: Duration::from_secs(60),
            signed: false,
            policy: RightsPolicy::Strict,
            backend: BackendChoice::Auto,
            buffer_capacity: ChannelConfig::DEFAULT_BUFFER_CAPACITY,
            chunk_capacity: MpkChannelConfig::DEFAULT_CHUNK_CAPACITY,
            poll_interval: ChannelConfig::DEFAULT_POLL_INTERVAL,
            workdir: workdir.into(),
            full: false,
        }
    }

    /// Counts that will actually run, and those skipped by the `full` gate.
    pub fn effective_counts(&self) -> (Vec<u64>, Vec<u64>) {
        self.counts
            .iter()
            .copied()
            .partition(|&n| self.full || n < FULL_ONLY_THRESHOLD)
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.trials < 1 {
            return Err(BenchError::BadPlan("trials must be >= 1".into()));
        }
        if !self.counts.windows(2).all(|w| w[0] < w[1]) {
            return Err(BenchError::BadPlan("counts must be strictly increasing".into()));
        }
        if self.transports.is_empty() {
            return Err(BenchError::BadPlan("no transports selected".into()));
        }
        Ok(())
    }

    fn corpus_path(&self, n: u64) -> PathBuf {
        self.workdir.join(format!("corpus-s{}-n{}.txt", self.seed, n))
    }
}

/// Run the whole plan. Per-cell failures become record outcomes; only
/// harness faults (bad plan, unwritable workdir) abort.
pub fn run_sweep(plan: &SweepPlan) -> Result<Vec<BenchRecord>, BenchError> {
    plan.validate()?;
    std::fs::create_dir_all(&plan.workdir)?;
    let (counts, _skipped) = plan.effective_counts();

    let mut texts: BTreeMap<u64, Arc<String>> = BTreeMap::new();
    for &n in &counts {
        let path = plan.corpus_path(n);
        if !path.exists() {
            generate_corpus(n, plan.seed, &path)
                .map_err(|e| BenchError::Workload(e.to_string()))?;
        }
        texts.insert(n, Arc::new(std::fs::read_to_string(&path)?));
    }

    let mut records = Vec::new();
    for &transport in &plan.transports {
        for &n in &counts {
            let text = Arc::clone(&texts[&n]);
            for round in 0..=plan.trials {
                let (elapsed_s, outcome) = run_trial(plan, transport, n, &text);
                if round > 0 {
                    records.push(BenchRecord {
                        transport,
                        n_words: n,
                        trial: round - 1,
                        signed: plan.signed,
                        policy: (transport == TransportKind::Mpk).then_some(plan.policy),
                        elapsed_s,
                        outcome,
                    });
                }
            }
        }
    }
    Ok(records)
}

static TRIAL_SERIAL: AtomicU64 = AtomicU64::new(0);

fn error_label(err: &WordcountError) -> String {
    match err {
        WordcountError::Transport(ChannelError::MessageTooLarge { .. }) => {
            "MessageTooLarge".to_string()
        }
        other => other.to_string(),
    }
}

fn channel_error_label(err: &ChannelError) -> String {
    match err {
        ChannelError::MessageTooLarge { .. } => "MessageTooLarge".to_string(),
        other => other.to_string(),
    }
}

/// The client channel a trial's worker starts from: an mpk endpoint made on
/// the harness thread, or a config the worker opens itself (the fifo open
/// is a blocking rendezvous and must happen inside the worker).
enum ClientSetup {
    Ready(Box<dyn Channel>),
    Open(ChannelConfig),
}

fn run_trial(
    plan: &SweepPlan,
    transport: TransportKind,
    n_words: u64,
    text: &Arc<String>,
) -> (f64, Outcome) {
    let serial = TRIAL_SERIAL.fetch_add(1, Ordering::Relaxed);
    let base = plan.workdir.join(format!("{}-n{}-{}", transport.as_str(), n_words, serial));

    let registry = Arc::new(CaRegistry::new());
    let identity = registry.register("bench-client");
    let audit = Arc::new(ServerAudit::new());
    let signed = plan.signed;

    // server context
    let (client_setup, server_handle) = match transport {
        TransportKind::Mpk => {
            let cfg = MpkChannelConfig {
                buffer_bytes: plan.chunk_capacity.next_multiple_of(page_size()),
                chunk_capacity: plan.chunk_capacity,
                policy: plan.policy,
                backend: plan.backend,
                trace: false,
                poll_interval: plan.poll_interval,
            };
            let (client_ep, mut server_ep) = match create_pair(&cfg) {
                Ok(pair) => pair,
                Err(e) => return (0.0, Outcome::Error(e.to_string())),
            };
            let (registry, audit) = (Arc::clone(&registry), Arc::clone(&audit));
            let handle = std::thread::spawn(move || {
                let _ = run_server(&mut server_ep, &registry, signed, &audit);
            });
            (ClientSetup::Ready(Box::new(client_ep)), handle)
        }
        TransportKind::Fifo => {
            let server_cfg = ChannelConfig::new(transport, Role::Server, &base)
                .with_poll_interval(plan.poll_interval);
            let (registry, audit) = (Arc::clone(&registry), Arc::clone(&audit));
            let handle = std::thread::spawn(move || {
                let Ok(mut ch) = open_channel(&server_cfg) else { return };
                let _ = run_server(ch.as_mut(), &registry, signed, &audit);
            });
            let client_cfg = ChannelConfig::new(transport, Role::Client, &base)
                .with_poll_interval(plan.poll_interval);
            (ClientSetup::Open(client_cfg), handle)
        }
        TransportKind::Uds | TransportKind::Shm => {
            let server_cfg = ChannelConfig::new(transport, Role::Server, &base)
                .with_buffer_capacity(plan.buffer_capacity)
                .with_poll_interval(plan.poll_interval);
            let mut ch = match open_channel(&server_cfg) {
                Ok(ch) => ch,
                Err(e) => return (0.0, Outcome::Error(channel_error_label(&e))),
            };
            let (registry, audit) = (Arc::clone(&registry), Arc::clone(&audit));
            let handle = std::thread::spawn(move || {
                let _ = run_server(ch.as_mut(), &registry, signed, &audit);
            });
            let client_cfg = ChannelConfig::new(transport, Role::Client, &base)
                .with_buffer_capacity(plan.buffer_capacity)
                .with_poll_interval(plan.poll_interval);
            (ClientSetup::Open(client_cfg), handle)
        }
    };

    // client context
    let (tx, rx) = mpsc::channel();
    let text = Arc::clone(text);
    let worker = std::thread::spawn(move || {
        let result = (|| {
            let mut ch: Box<dyn Channel> = match client_setup {
                ClientSetup::Ready(ch) => ch,
                ClientSetup::Open(cfg) => {
                    open_channel(&cfg).map_err(|e| channel_error_label(&e))?
                }
            };
            // untimed readiness ping: parks the server inside its receive
            // loop and completes any one-time session setup, so the timed
            // request measures the exchange rather than thread startup
            request_count(ch.as_mut(), &identity, "ping", signed, 0)
                .map_err(|e| error_label(&e))?;
            let out = request_count(ch.as_mut(), &identity, &text, signed, 1)
                .map_err(|e| error_label(&e));
            let _ = ch.close();
            out
        })();
        let _ = tx.send(result);
    });

    match rx.recv_timeout(plan.trial_deadline) {
        Ok(Ok((count, elapsed))) => {
            let _ = worker.join();
            let _ = server_handle.join();
            if count == n_words {
                (elapsed.as_secs_f64(), Outcome::Ok)
            } else {
                (0.0, Outcome::Error(format!("count mismatch: got {count}, expected {n_words}")))
            }
        }
        Ok(Err(label)) => {
            let _ = worker.join();
            // the server may be blocked on a channel the client never
            // finished opening; abandon it rather than hang the sweep
            drop(server_handle);
            (0.0, Outcome::Error(label))
        }
        Err(_) => {
            drop(worker);
            drop(server_handle);
            (0.0, Outcome::Error("Deadline".to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_plan(dir: &std::path::Path) -> SweepPlan {
        let mut plan = SweepPlan::new(dir);
        plan.counts = vec![100];
        plan.trials = 3;
        plan.backend = BackendChoice::Emulated;
        plan
    }

    #[test]
    fn cardinality_counts_times_transports_times_trials() {
        let dir = tempfile::tempdir().unwrap();
        let records = run_sweep(&quick_plan(dir.path())).unwrap();
        assert_eq!(records.len(), 12); // 1 count x 4 transports x 3 trials
        assert!(records.iter().all(|r| r.outcome.is_ok()), "{records:?}");
        assert!(records
            .iter()
            .all(|r| r.outcome.is_ok() == (r.elapsed_s > 0.0)));
    }

    #[test]
    fn shm_cell_over_capacity_records_message_too_large() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = quick_plan(dir.path());
        plan.counts = vec![100_000];
        plan.transports = vec![TransportKind::Shm];
        plan.trials = 1;
        plan.buffer_capacity = 4096; // far below the ~750 KB corpus
        let records = run_sweep(&plan).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].outcome, Outcome::Error("MessageTooLarge".to_string()));
    }

    #[test]
    fn record_sets_are_deterministic_modulo_elapsed() {
        let dir = tempfile::tempdir().unwrap();
        let plan = quick_plan(dir.path());
        let a = run_sweep(&plan).unwrap();
        let b = run_sweep(&plan).unwrap();
        let strip = |rs: &[BenchRecord]| {
            rs.iter()
                .map(|r| (r.transport, r.n_words, r.trial, r.signed, r.policy, r.outcome.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn full_gate_excludes_large_counts() {
        let mut plan = SweepPlan::new("/tmp/unused");
        plan.counts = vec![100, 10_000_000, 100_000_000];
        let (run, skipped) = plan.effective_counts();
        assert_eq!(run, vec![100]);
        assert_eq!(skipped, vec![10_000_000, 100_000_000]);
        plan.full = true;
        let (run, skipped) = plan.effective_counts();
        assert_eq!(run.len(), 3);
        assert!(skipped.is_empty());
    }

    #[test]
    fn plans_are_validated() {
        let mut plan = SweepPlan::new("/tmp/unused");
        plan.trials = 0;
        assert!(matches!(run_sweep(&plan), Err(BenchError::BadPlan(_))));
        let mut plan = SweepPlan::new("/tmp/unused");
        plan.counts = vec![100, 100];
        assert!(matches!(run_sweep(&plan), Err(BenchError::BadPlan(_))));
    }
}
