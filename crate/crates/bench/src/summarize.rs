//! Median table with the published reference column.
//!
//! Local medians are labeled "this machine". The reference columns repeat
//! the numbers measured on the original CloudLab C6420 host and are shown
//! for comparison only — they are never asserted against local timings,
//! which depend entirely on the hardware.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use mpklink::mpk::RightsPolicy;
use mpklink::transport::TransportKind;

use crate::records::{median, BenchRecord, Outcome};

/// Reference results per word count: (n, MPKLink seconds, best-other
/// seconds, best-other transport), kept verbatim as printed strings.
pub const REFERENCE_TABLE: &[(u64, &str, &str, &str)] = &[
    (100, "0.00203", "0.00166", "Shared Memory"),
    (1_000, "0.00269", "0.00168", "Unix Sockets"),
    (10_000, "0.00364", "0.00154", "Shared Memory"),
    (100_000, "0.01536", "0.00660", "OS Pipe"),
    (1_000_000, "0.18374", "0.04571", "Unix Sockets"),
    (10_000_000, "1.40530", "0.48885", "Unix Sockets"),
    (100_000_000, "14.42533", "5.10027", "Unix Sockets"),
];

/// One table column: a baseline transport, or mpk under one rights policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Column {
    transport: TransportKind,
    policy: Option<RightsPolicy>,
}

impl Column {
    fn header(&self) -> String {
        match self.policy {
            Some(p) => format!("{}[{}]", self.transport, p),
            None => self.transport.to_string(),
        }
    }

    fn sort_key(&self) -> (TransportKind, u8) {
        let policy_rank = match self.policy {
            None => 0,
            Some(RightsPolicy::Strict) => 1,
            Some(RightsPolicy::Relaxed) => 2,
        };
        (self.transport, policy_rank)
    }
}

impl Ord for Column {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for Column {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    /// Median over successful trials.
    Median(f64),
    /// Trials ran but none succeeded; carries the first error.
    AllFailed(String),
    /// No trials for this cell.
    Empty,
}

/// One summary table per signed mode present in the records; mpk gets one
/// column per rights policy seen.
#[derive(Debug)]
pub struct Summary {
    groups: BTreeMap<bool, Group>,
}

#[derive(Debug, Default)]
struct Group {
    cells: BTreeMap<(u64, Column), Cell>,
    columns: BTreeSet<Column>,
    rows: BTreeSet<u64>,
}

/// Aggregate records into per-(transport, word count) medians.
pub fn summarize(records: &[BenchRecord]) -> Summary {
    let mut samples: BTreeMap<(bool, u64, Column), (Vec<f64>, Option<String>)> = BTreeMap::new();
    for r in records {
        let column = Column { transport: r.transport, policy: r.policy };
        let entry = samples.entry((r.signed, r.n_words, column)).or_default();
        match &r.outcome {
            Outcome::Ok => entry.0.push(r.elapsed_s),
            Outcome::Error(text) => {
                entry.1.get_or_insert_with(|| text.clone());
            }
        }
    }
    let mut groups: BTreeMap<bool, Group> = BTreeMap::new();
    for ((signed, n, column), (oks, first_err)) in samples {
        let group = groups.entry(signed).or_default();
        let cell = match median(&oks) {
            Some(m) => Cell::Median(m),
            None => Cell::AllFailed(first_err.unwrap_or_else(|| "no data".into())),
        };
        group.cells.insert((n, column), cell);
        group.columns.insert(column);
        group.rows.insert(n);
    }
    Summary { groups }
}

/// Baseline column set shown even when a group has no data for them.
fn default_columns() -> BTreeSet<Column> {
    [TransportKind::Fifo, TransportKind::Uds, TransportKind::Shm, TransportKind::Mpk]
        .into_iter()
        .map(|transport| Column { transport, policy: None })
        .collect()
}

impl Summary {
    /// Render every group as a fixed-width text table. All reference rows
    /// appear whether or not local data exists for them.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.groups.is_empty() {
            out.push_str("no records; reference table only\n");
            render_group(&mut out, &Group::default());
            return out;
        }
        for (signed, group) in &self.groups {
            writeln!(out, "mode: {}", if *signed { "signed" } else { "unsigned" }).unwrap();
            render_group(&mut out, group);
            out.push('\n');
        }
        out
    }
}

fn render_group(out: &mut String, group: &Group) {
    let mut columns = group.columns.clone();
    if columns.is_empty() {
        columns = default_columns();
    }
    let mut rows: BTreeSet<u64> = group.rows.clone();
    rows.extend(REFERENCE_TABLE.iter().map(|(n, ..)| *n));

    let mut header = format!("{:>12} |", "word_count");
    for col in &columns {
        write!(header, " {:>22}", col.header()).unwrap();
    }
    write!(header, " {:>26}", "best other (this machine)").unwrap();
    write!(header, " | {:>10} {:>28}", "MPKLink", "best other (ref. hardware)").unwrap();
    let width = header.chars().count();
    writeln!(out, "{header}").unwrap();
    writeln!(out, "{}", "-".repeat(width)).unwrap();

    for n in rows {
        let mut line = format!("{n:>12} |");
        let mut best_other: Option<(f64, TransportKind)> = None;
        for col in &columns {
            let cell = group.cells.get(&(n, *col)).unwrap_or(&Cell::Empty);
            let text = match cell {
                Cell::Median(m) => {
                    if col.transport != TransportKind::Mpk
                        && best_other.map_or(true, |(best, _)| *m < best)
                    {
                        best_other = Some((*m, col.transport));
                    }
                    format!("{m:.5}")
                }
                Cell::AllFailed(e) => format!("error({e})"),
                Cell::Empty => "-".to_string(),
            };
            write!(line, " {text:>22}").unwrap();
        }
        match best_other {
            Some((m, t)) => write!(line, " {:>26}", format!("{m:.5} ({t})")).unwrap(),
            None => write!(line, " {:>26}", "-").unwrap(),
        }
        match REFERENCE_TABLE.iter().find(|(rn, ..)| *rn == n) {
            Some((_, mpk_ref, other_ref, other_name)) => {
                write!(line, " | {mpk_ref:>10} {:>28}", format!("{other_ref} ({other_name})"))
                    .unwrap()
            }
            None => write!(line, " | {:>10} {:>28}", "-", "-").unwrap(),
        }
        writeln!(out, "{line}").unwrap();
    }
    writeln!(
        out,
        "local medians: this machine; '-': empty cell (no trials); reference: paper hardware (CloudLab C6420), comparison only"
    )
    .unwrap();
}
