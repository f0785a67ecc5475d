//! Tables and plot data from experiment results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::evaluation::{elo_tournament_with_roster, win_matrix, MatchResult, DEFAULT_K, DEFAULT_ORDERINGS};
use crate::experiment::{DemandCategory, ExperimentKind, RationalOutcome, TrialDetail, TrialRecord};
use crate::gateway::{Student, Verdict};
use crate::ids::Contestant;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no results to report")]
    Empty,
    #[error("results contain no rows this report understands")]
    NothingToReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    /// Aligned text tables.
    Table,
    /// Comma-separated plot data, one block per table.
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub notes: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.to_owned(),
            notes: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn note(mut self, note: &str) -> Self {
        self.notes.push(note.to_owned());
        self
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.get(row)?.get(j).map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReportOptions {
    pub n_orderings: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            n_orderings: DEFAULT_ORDERINGS,
            seed: 0,
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn build_report(records: &[TrialRecord], options: ReportOptions) -> Result<Vec<Table>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut tables = Vec::new();
    tables.extend(rational_table(records));
    tables.extend(demand_tables(records));
    tables.extend(positional_table(records));
    tables.extend(answer_tables(records, options));
    if tables.is_empty() {
        return Err(ReportError::NothingToReport);
    }
    Ok(tables)
}

fn rational_table(records: &[TrialRecord]) -> Option<Table> {
    let outcomes = [
        RationalOutcome::NoPurchase,
        RationalOutcome::BoughtOne,
        RationalOutcome::BoughtExpensive,
        RationalOutcome::BoughtBoth,
        RationalOutcome::ParseFailure,
    ];
    let mut counts: BTreeMap<(ExperimentKind, &str), BTreeMap<RationalOutcome, usize>> = BTreeMap::new();
    for r in records {
        if let TrialDetail::Rational { strategy, outcome, .. } = &r.detail {
            *counts
                .entry((r.kind, strategy.as_str()))
                .or_default()
                .entry(*outcome)
                .or_default() += 1;
        }
    }
    if counts.is_empty() {
        return None;
    }
    let mut t = Table::new(
        "rational choice",
        &[
            "experiment",
            "strategy",
            "trials",
            "no_purchase",
            "bought_one",
            "bought_expensive",
            "bought_both",
            "parse_failure",
            "irrational_pct",
        ],
    )
    .note("irrational_pct excludes parse failures from the denominator");
    for ((kind, strategy), c) in counts {
        let total: usize = c.values().sum();
        let failures = c.get(&RationalOutcome::ParseFailure).copied().unwrap_or(0);
        let irrational: usize = c.iter().filter(|(o, _)| !o.is_rational() && **o != RationalOutcome::ParseFailure).map(|(_, n)| n).sum();
        let mut row = vec![kind.to_string(), strategy.to_owned(), total.to_string()];
        row.extend(outcomes.iter().map(|o| c.get(o).copied().unwrap_or(0).to_string()));
        row.push(pct(ratio(irrational, total - failures)));
        t.rows.push(row);
    }
    Some(t)
}

/// Category shares per (inspection, gold price).
type Demand = BTreeMap<(bool, u64), BTreeMap<DemandCategory, usize>>;

fn demand(records: &[TrialRecord]) -> Demand {
    let mut d = Demand::new();
    for r in records {
        if let TrialDetail::PriceSweep {
            inspection,
            gold_price,
            category,
            ..
        } = &r.detail
        {
            *d.entry((*inspection, *gold_price)).or_default().entry(*category).or_default() += 1;
        }
    }
    d
}

fn demand_tables(records: &[TrialRecord]) -> Vec<Table> {
    let d = demand(records);
    if d.is_empty() {
        return Vec::new();
    }
    let mut curve = Table::new(
        "demand by gold price",
        &["inspection", "gold_price", "trials", "gold_bought_pct", "only_gold_pct", "gold_and_more_pct", "only_alternative_pct", "no_purchase_pct"],
    );
    for ((inspection, price), c) in &d {
        let total: usize = c.values().sum();
        let share = |cat| ratio(c.get(&cat).copied().unwrap_or(0), total);
        let gold = share(DemandCategory::OnlyGold) + share(DemandCategory::GoldAndMore);
        let mut row = vec![inspection.to_string(), price.to_string(), total.to_string(), pct(gold)];
        row.extend(DemandCategory::ALL.iter().map(|&cat| pct(share(cat))));
        curve.rows.push(row);
    }
    let mut out = vec![curve];

    let pooled = |inspection: bool| -> Option<BTreeMap<DemandCategory, f64>> {
        let mut totals: BTreeMap<DemandCategory, usize> = BTreeMap::new();
        let mut n = 0;
        for ((i, _), c) in &d {
            if *i == inspection {
                for (cat, k) in c {
                    *totals.entry(*cat).or_default() += k;
                    n += k;
                }
            }
        }
        (n > 0).then(|| DemandCategory::ALL.iter().map(|&cat| (cat, ratio(totals.get(&cat).copied().unwrap_or(0), n))).collect())
    };
    if let (Some(with), Some(without)) = (pooled(true), pooled(false)) {
        let mut t = Table::new("inspection deltas", &["category", "with_inspection_pct", "metadata_only_pct", "delta_pct"])
            .note("delta_pct = with_inspection_pct - metadata_only_pct, pooled over all gold prices");
        for cat in DemandCategory::ALL {
            t.rows.push(vec![
                cat.label().to_owned(),
                pct(with[&cat]),
                pct(without[&cat]),
                pct(with[&cat] - without[&cat]),
            ]);
        }
        out.push(t);
    }
    out
}

/// Acceptance rate of whatever option sits in each display slot.
pub fn positional_rates(records: &[TrialRecord]) -> Vec<f64> {
    let mut bought: Vec<usize> = Vec::new();
    let mut shown: Vec<usize> = Vec::new();
    for r in records {
        if let TrialDetail::Positional { verdicts, .. } = &r.detail {
            if bought.len() < verdicts.len() {
                bought.resize(verdicts.len(), 0);
                shown.resize(verdicts.len(), 0);
            }
            for (slot, v) in verdicts.iter().enumerate() {
                shown[slot] += 1;
                if *v == Verdict::Buy {
                    bought[slot] += 1;
                }
            }
        }
    }
    bought.iter().zip(&shown).map(|(&b, &s)| ratio(b, s)).collect()
}

/// `rate / mean(rate) - 1`; all zeros when nothing was bought.
pub fn normalize_rates(rates: &[f64]) -> Vec<f64> {
    let mean = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
    rates
        .iter()
        .map(|r| if mean == 0.0 { 0.0 } else { r / mean - 1.0 })
        .collect()
}

fn positional_table(records: &[TrialRecord]) -> Option<Table> {
    let rates = positional_rates(records);
    if rates.is_empty() {
        return None;
    }
    let mut t = Table::new("positional bias", &["position", "acceptance_pct", "normalized"])
        .note("normalized = acceptance / mean acceptance over positions - 1");
    for (slot, (rate, norm)) in rates.iter().zip(normalize_rates(&rates)).enumerate() {
        t.rows.push(vec![(slot + 1).to_string(), pct(*rate), num(norm)]);
    }
    Some(t)
}

/// Decided matches as Elo input, grouped by experiment kind.
pub fn match_results(records: &[TrialRecord]) -> BTreeMap<ExperimentKind, Vec<MatchResult>> {
    let mut out: BTreeMap<ExperimentKind, Vec<MatchResult>> = BTreeMap::new();
    for r in records {
        if let TrialDetail::Match {
            first,
            second,
            winner: Some(w),
            ..
        } = &r.detail
        {
            out.entry(r.kind).or_default().push(MatchResult {
                contestant_a: first.clone(),
                contestant_b: second.clone(),
                winner: if w == first { Student::A } else { Student::B },
                question_id: r.question_id.clone(),
            });
        }
    }
    out
}

fn answer_tables(records: &[TrialRecord], options: ReportOptions) -> Vec<Table> {
    let mut out = Vec::new();
    // arms in the order they were run, with mean spend
    let mut arms: BTreeMap<ExperimentKind, Vec<Contestant>> = BTreeMap::new();
    let mut spend: BTreeMap<(ExperimentKind, Contestant), (u64, usize)> = BTreeMap::new();
    for r in records {
        if let TrialDetail::Answer { arm, spent, .. } = &r.detail {
            let list = arms.entry(r.kind).or_default();
            if !list.contains(arm) {
                list.push(arm.clone());
            }
            let e = spend.entry((r.kind, arm.clone())).or_default();
            e.0 += spent;
            e.1 += 1;
        }
    }
    let matches = match_results(records);
    for (kind, roster) in &arms {
        let results = matches.get(kind).map(Vec::as_slice).unwrap_or(&[]);
        let mut t = Table::new(
            &format!("{kind} elo"),
            &["contestant", "mean_rating", "rating_std", "mean_spent", "answers"],
        )
        .note(&format!(
            "{} orderings, seed {}, k {}",
            options.n_orderings, options.seed, DEFAULT_K
        ));
        let elo = elo_tournament_with_roster(results, roster, options.n_orderings, options.seed, DEFAULT_K).ok();
        for c in roster {
            let (total, n) = spend[&(*kind, c.clone())];
            let (mean, std) = elo
                .as_ref()
                .and_then(|e| e.get(c))
                .map(|s| (num(s.mean_rating), num(s.rating_std)))
                .unwrap_or_else(|| ("-".into(), "-".into()));
            t.rows.push(vec![c.to_string(), mean, std, num(total as f64 / n as f64), n.to_string()]);
        }
        if elo.is_none() {
            t.notes.push("no decided matches".into());
        }
        out.push(t);

        if !results.is_empty() {
            let m = win_matrix(results);
            let order: Vec<&Contestant> = roster.iter().filter(|c| m.contestants.contains(c)).collect();
            let mut columns = vec!["row_beats_column".to_owned()];
            columns.extend(order.iter().map(|c| c.to_string()));
            let mut w = Table {
                title: format!("{kind} win rates"),
                notes: vec!["share of decided matches won by the row contestant".into()],
                columns,
                rows: Vec::new(),
            };
            for row in &order {
                let mut cells = vec![row.to_string()];
                cells.extend(order.iter().map(|col| m.rate(row, col).map(pct).unwrap_or_else(|| "-".into())));
                w.rows.push(cells);
            }
            out.push(w);
        }
    }
    out.extend(wins_by_spend(records));
    out
}

/// Cumulative wins of each inspection setting against the winner's spend.
fn wins_by_spend(records: &[TrialRecord]) -> Option<Table> {
    let mut wins: Vec<(u64, bool)> = Vec::new();
    for r in records.iter().filter(|r| r.kind == ExperimentKind::InspectionCompare) {
        if let TrialDetail::Match {
            first,
            winner: Some(w),
            first_spent,
            second_spent,
            ..
        } = &r.detail
        {
            let spent = if w == first { *first_spent } else { *second_spent };
            wins.push((spent, w.as_str().starts_with("inspection")));
        }
    }
    if wins.is_empty() {
        return None;
    }
    let spends: BTreeSet<u64> = wins.iter().map(|w| w.0).collect();
    let mut t = Table::new("inspection wins by spend", &["spent_at_most", "inspection_wins", "metadata_wins"])
        .note("cumulative over matches whose winner spent at most the given credits");
    for s in spends {
        let count = |inspection| wins.iter().filter(|w| w.0 <= s && w.1 == inspection).count();
        t.rows.push(vec![s.to_string(), count(true).to_string(), count(false).to_string()]);
    }
    Some(t)
}

pub fn render(tables: &[Table], format: ReportFormat) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        match format {
            ReportFormat::Table => render_text(t, &mut out),
            ReportFormat::Csv => {
                let _ = writeln!(out, "# {}", t.title);
                for n in &t.notes {
                    let _ = writeln!(out, "# {n}");
                }
                let _ = writeln!(out, "{}", t.columns.join(","));
                for r in &t.rows {
                    let _ = writeln!(out, "{}", r.join(","));
                }
            }
        }
    }
    out
}

fn render_text(t: &Table, out: &mut String) {
    let mut widths: Vec<usize> = t.columns.iter().map(String::len).collect();
    for r in &t.rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let _ = writeln!(out, "== {} ==", t.title);
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(&t.columns));
    for r in &t.rows {
        let _ = writeln!(out, "{}", line(r));
    }
    for n in &t.notes {
        let _ = writeln!(out, "({n})");
    }
}
