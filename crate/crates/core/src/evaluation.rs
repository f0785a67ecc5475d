//! Pairwise judging, Elo tournaments over shuffled game orders, win
//! matrices, and a checker for the inspection inequality.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    parse_eval_verdict, render, Gateway, GatewayError, Slots, Student, TemplateId,
    REASK_INSTRUCTION,
};
use crate::ids::Contestant;

pub const INITIAL_RATING: f64 = 1500.0;
pub const DEFAULT_K: f64 = 32.0;
pub const DEFAULT_ORDERINGS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum EloError {
    #[error("no match results")]
    NoResults,
    #[error("need at least one ordering")]
    NoOrderings,
}

/// Probability that a player rated `rating` beats one rated `opponent`.
pub fn expected_score(rating: f64, opponent: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((opponent - rating) / 400.0))
}

/// `score` is 1 for a win, 0.5 for a draw, 0 for a loss.
pub fn update_rating(rating: f64, k: f64, score: f64, expected: f64) -> f64 {
    rating + k * (score - expected)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub contestant_a: Contestant,
    pub contestant_b: Contestant,
    pub winner: Student,
    pub question_id: String,
}

impl MatchResult {
    pub fn winner(&self) -> &Contestant {
        match self.winner {
            Student::A => &self.contestant_a,
            Student::B => &self.contestant_b,
        }
    }

    pub fn loser(&self) -> &Contestant {
        match self.winner {
            Student::A => &self.contestant_b,
            Student::B => &self.contestant_a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub contestant: Contestant,
    pub mean_rating: f64,
    pub rating_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EloReport {
    /// Sorted by contestant.
    pub ratings: Vec<RatingSummary>,
    pub n_orderings: usize,
    pub seed: u64,
    pub k: f64,
}

impl EloReport {
    pub fn get(&self, contestant: &Contestant) -> Option<&RatingSummary> {
        self.ratings.iter().find(|r| &r.contestant == contestant)
    }
}

/// Replays `results` in one fixed order from fresh ratings.
pub fn replay_order(results: &[&MatchResult], roster: &[Contestant], k: f64) -> BTreeMap<Contestant, f64> {
    let mut ratings: BTreeMap<Contestant, f64> =
        roster.iter().map(|c| (c.clone(), INITIAL_RATING)).collect();
    for m in results {
        let w = ratings.get(m.winner()).copied().unwrap_or(INITIAL_RATING);
        let l = ratings.get(m.loser()).copied().unwrap_or(INITIAL_RATING);
        ratings.insert(m.winner().clone(), update_rating(w, k, 1.0, expected_score(w, l)));
        ratings.insert(m.loser().clone(), update_rating(l, k, 0.0, expected_score(l, w)));
    }
    ratings
}

/// RNG for the `index`-th game ordering of a tournament seeded with `seed`.
fn ordering_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn elo_tournament(results: &[MatchResult], n_orderings: usize, seed: u64) -> Result<EloReport, EloError> {
    elo_tournament_with_roster(results, &[], n_orderings, seed, DEFAULT_K)
}

/// Elo over `n_orderings` seeded shuffles of `results`. Contestants listed in
/// `roster` are reported even when they played no match.
pub fn elo_tournament_with_roster(
    results: &[MatchResult],
    roster: &[Contestant],
    n_orderings: usize,
    seed: u64,
    k: f64,
) -> Result<EloReport, EloError> {
    if results.is_empty() {
        return Err(EloError::NoResults);
    }
    if n_orderings == 0 {
        return Err(EloError::NoOrderings);
    }
    let everyone: Vec<Contestant> = roster
        .iter()
        .cloned()
        .chain(results.iter().flat_map(|m| [m.contestant_a.clone(), m.contestant_b.clone()]))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut samples: BTreeMap<&Contestant, Vec<f64>> =
        everyone.iter().map(|c| (c, Vec::with_capacity(n_orderings))).collect();
    for i in 0..n_orderings {
        let mut order: Vec<&MatchResult> = results.iter().collect();
        order.shuffle(&mut ordering_rng(seed, i));
        let ratings = replay_order(&order, &everyone, k);
        for (c, r) in ratings {
            if let Some(s) = samples.get_mut(&c) {
                s.push(r);
            }
        }
    }
    let ratings = samples
        .into_iter()
        .map(|(c, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            RatingSummary {
                contestant: c.clone(),
                mean_rating: mean,
                rating_std: var.sqrt(),
            }
        })
        .collect();
    Ok(EloReport {
        ratings,
        n_orderings,
        seed,
        k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub contestants: Vec<Contestant>,
    /// `wins[i][j]`: wins of row `i` over column `j`.
    pub wins: Vec<Vec<u32>>,
    /// `rates[i][j]`: win rate of row over column; `None` without matches and
    /// on the diagonal.
    pub rates: Vec<Vec<Option<f64>>>,
}

impl WinMatrix {
    pub fn rate(&self, row: &Contestant, col: &Contestant) -> Option<f64> {
        let i = self.contestants.iter().position(|c| c == row)?;
        let j = self.contestants.iter().position(|c| c == col)?;
        self.rates[i][j]
    }
}

pub fn win_matrix(results: &[MatchResult]) -> WinMatrix {
    let contestants: Vec<Contestant> = results
        .iter()
        .flat_map(|m| [m.contestant_a.clone(), m.contestant_b.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let idx = |c: &Contestant| contestants.binary_search(c).expect("listed");
    let n = contestants.len();
    let mut wins = vec![vec![0u32; n]; n];
    for m in results {
        let (w, l) = (idx(m.winner()), idx(m.loser()));
        if w != l {
            wins[w][l] += 1;
        }
    }
    let rates = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let played = wins[i][j] + wins[j][i];
                    (i != j && played > 0).then(|| f64::from(wins[i][j]) / f64::from(played))
                })
                .collect()
        })
        .collect();
    WinMatrix {
        contestants,
        wins,
        rates,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Good {
    /// Value estimate without inspection, in [0, 1].
    pub f_value: f64,
    /// Value estimate with inspection, in [0, 1].
    pub g_value: f64,
    pub utility: f64,
    pub purchased: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InspectionInstance {
    pub goods: Vec<Good>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InspectionCheck {
    Holds { with_inspection: f64, without_inspection: f64 },
    Violated { with_inspection: f64, without_inspection: f64 },
    /// Good at this index has `g_value < f_value`, a value outside [0, 1]
    /// or a negative utility.
    AssumptionViolated { good: usize },
}

impl InspectionCheck {
    pub fn holds(&self) -> bool {
        matches!(self, InspectionCheck::Holds { .. })
    }
}

/// Under `g >= f` for every good, expected utility of the purchased set is
/// at least as high with inspection as without.
pub fn check_inspection_theorem(instance: &InspectionInstance) -> InspectionCheck {
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if let Some(good) = instance
        .goods
        .iter()
        .position(|g| g.g_value < g.f_value || !unit(g.f_value) || !unit(g.g_value) || !(g.utility >= 0.0))
    {
        return InspectionCheck::AssumptionViolated { good };
    }
    let total = |value: fn(&Good) -> f64| -> f64 {
        instance
            .goods
            .iter()
            .filter(|g| g.purchased)
            .map(|g| value(g) * g.utility)
            .sum()
    };
    let with_inspection = total(|g| g.g_value);
    let without_inspection = total(|g| g.f_value);
    if with_inspection >= without_inspection {
        InspectionCheck::Holds {
            with_inspection,
            without_inspection,
        }
    } else {
        InspectionCheck::Violated {
            with_inspection,
            without_inspection,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One judged comparison, kept even when the verdict could not be parsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub question_id: String,
    /// Contestant shown as student A.
    pub presented_a: Contestant,
    pub presented_b: Contestant,
    pub seed: u64,
    /// `None` when the match was discarded.
    pub result: Option<MatchResult>,
    pub raw: String,
}

/// A contestant's answer to one question.
#[derive(Clone, Copy, Debug)]
pub struct Entry<'a> {
    pub contestant: &'a Contestant,
    pub answer: &'a str,
}

/// Asks the judge which of two answers is better. Which contestant is shown
/// as student A is drawn from `seed`.
pub fn pairwise_evaluate(
    question_id: &str,
    question: &str,
    first: Entry<'_>,
    second: Entry<'_>,
    gold_answer: &str,
    seed: u64,
    gateway: &mut Gateway<'_>,
) -> Result<Judgement, EvalError> {
    let swap = ChaCha8Rng::seed_from_u64(seed).random_bool(0.5);
    let (a, b) = if swap { (second, first) } else { (first, second) };
    let mut slots = Slots::new();
    slots.insert("question".into(), question.into());
    slots.insert("answer_a".into(), a.answer.into());
    slots.insert("answer_b".into(), b.answer.into());
    slots.insert("answer_gold".into(), gold_answer.into());
    let request = render(TemplateId::Evaluator, &slots)?;
    let (raw, parsed) = gateway.complete_parsed(request, REASK_INSTRUCTION, parse_eval_verdict)?;
    Ok(Judgement {
        question_id: question_id.to_owned(),
        presented_a: a.contestant.clone(),
        presented_b: b.contestant.clone(),
        seed,
        result: parsed.ok().map(|winner| MatchResult {
            contestant_a: a.contestant.clone(),
            contestant_b: b.contestant.clone(),
            winner,
            question_id: question_id.to_owned(),
        }),
        raw,
    })
}

/// Reference answer from a model without retrieval.
pub fn closed_book_answer(question: &str, gateway: &mut Gateway<'_>) -> Result<String, GatewayError> {
    let mut slots = Slots::new();
    slots.insert("question".into(), question.into());
    gateway.complete(render(TemplateId::ClosedBook, &slots)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub judge_a: String,
    pub judge_b: String,
    pub compared: usize,
    pub rate: Option<f64>,
}

/// Pairwise agreement between judges that each picked a winner (or nothing)
/// for the same list of comparisons.
pub fn judge_agreement(verdicts: &BTreeMap<String, Vec<Option<Contestant>>>) -> Vec<Agreement> {
    let judges: Vec<&String> = verdicts.keys().collect();
    let mut out = Vec::new();
    for (i, a) in judges.iter().enumerate() {
        for b in &judges[i + 1..] {
            let pairs: Vec<(&Contestant, &Contestant)> = verdicts[*a]
                .iter()
                .zip(&verdicts[*b])
                .filter_map(|(x, y)| Some((x.as_ref()?, y.as_ref()?)))
                .collect();
            let agree = pairs.iter().filter(|(x, y)| x == y).count();
            out.push(Agreement {
                judge_a: (*a).clone(),
                judge_b: (*b).clone(),
                compared: pairs.len(),
                rate: (!pairs.is_empty()).then(|| agree as f64 / pairs.len() as f64),
            });
        }
    }
    out
}

pub fn parse_match_results(input: &str) -> Result<Vec<MatchResult>, String> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockScript;

    fn m(a: &str, b: &str, winner: Student) -> MatchResult {
        MatchResult {
            contestant_a: a.into(),
            contestant_b: b.into(),
            winner,
            question_id: "q".into(),
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(expected_score(1500.0, 1500.0), 0.5);
        assert!((expected_score(1500.0, 1900.0) - 1.0 / 11.0).abs() < 1e-12);
        assert_eq!(update_rating(1500.0, 32.0, 1.0, 0.5), 1516.0);
        assert_eq!(update_rating(1500.0, 32.0, 0.5, 0.5), 1500.0);
        assert_eq!(update_rating(1500.0, 32.0, 0.0, 0.5), 1484.0);
    }

    #[test]
    fn single_match_tournament() {
        let report = elo_tournament(&[m("A", "B", Student::A)], 1000, 7).unwrap();
        let a = report.get(&"A".into()).unwrap();
        let b = report.get(&"B".into()).unwrap();
        assert_eq!((a.mean_rating, a.rating_std), (1516.0, 0.0));
        assert_eq!((b.mean_rating, b.rating_std), (1484.0, 0.0));
    }

    #[test]
    fn idle_contestant_stays_at_start() {
        let report =
            elo_tournament_with_roster(&[m("A", "B", Student::B)], &["C".into()], 50, 1, DEFAULT_K).unwrap();
        let c = report.get(&"C".into()).unwrap();
        assert_eq!((c.mean_rating, c.rating_std), (1500.0, 0.0));
        assert_eq!(elo_tournament(&[], 10, 1), Err(EloError::NoResults));
    }

    #[test]
    fn transitive_round_robin_orders_ratings() {
        let results = [m("A", "B", Student::A), m("A", "C", Student::A), m("B", "C", Student::A)];
        let r = elo_tournament(&results, 200, 3).unwrap();
        let mean = |c: &str| r.get(&c.into()).unwrap().mean_rating;
        assert!(mean("A") > mean("B") && mean("B") > mean("C"));
        assert_eq!(r, elo_tournament(&results, 200, 3).unwrap());
    }

    #[test]
    fn win_matrix_counts() {
        let results = [m("A", "B", Student::A), m("B", "A", Student::B), m("A", "B", Student::B)];
        let w = win_matrix(&results);
        assert!((w.rate(&"A".into(), &"B".into()).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.rate(&"B".into(), &"A".into()).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(w.rate(&"A".into(), &"A".into()), None);
        let sparse = win_matrix(&[m("A", "B", Student::A), m("C", "D", Student::A)]);
        assert_eq!(sparse.rate(&"A".into(), &"C".into()), None);
    }

    #[test]
    fn inspection_checker() {
        let equal = InspectionInstance {
            goods: vec![Good { f_value: 0.4, g_value: 0.4, utility: 2.0, purchased: true }],
        };
        match check_inspection_theorem(&equal) {
            InspectionCheck::Holds { with_inspection, without_inspection } => {
                assert_eq!(with_inspection, without_inspection)
            }
            other => panic!("{other:?}"),
        }
        let bad = InspectionInstance {
            goods: vec![
                Good { f_value: 0.1, g_value: 0.2, utility: 1.0, purchased: true },
                Good { f_value: 0.5, g_value: 0.3, utility: 1.0, purchased: false },
            ],
        };
        assert_eq!(check_inspection_theorem(&bad), InspectionCheck::AssumptionViolated { good: 1 });
    }

    #[test]
    fn judge_transcript_picks_b() {
        let script = MockScript::with_default(include_str!("../tests/fixtures/evaluation_debate_factual.txt"));
        let mut gw = Gateway::new(&script, "m");
        let (x, y): (Contestant, Contestant) = ("x".into(), "y".into());
        let j = pairwise_evaluate(
            "q1",
            "Q",
            Entry { contestant: &x, answer: "ax" },
            Entry { contestant: &y, answer: "ay" },
            "gold",
            0,
            &mut gw,
        )
        .unwrap();
        let result = j.result.unwrap();
        assert_eq!(result.winner, Student::B);
        assert_eq!(result.winner(), &j.presented_b);
    }

    #[test]
    fn presentation_swap_flips_always_a_judge() {
        let script = MockScript::with_default("VERDICT: Better answer from student A");
        let mut gw = Gateway::new(&script, "m");
        let (x, y): (Contestant, Contestant) = ("x".into(), "y".into());
        let mut winners = BTreeSet::new();
        for seed in 0..32 {
            let j = pairwise_evaluate(
                "q",
                "Q",
                Entry { contestant: &x, answer: "ax" },
                Entry { contestant: &y, answer: "ay" },
                "g",
                seed,
                &mut gw,
            )
            .unwrap();
            let r = j.result.unwrap();
            assert_eq!(r.winner(), &j.presented_a);
            winners.insert(r.winner().clone());
        }
        assert_eq!(winners.len(), 2);
    }

    #[test]
    fn unparseable_judgement_is_discarded() {
        let script = MockScript::with_default("it's a tie");
        let mut gw = Gateway::new(&script, "m");
        let (x, y): (Contestant, Contestant) = ("x".into(), "y".into());
        let j = pairwise_evaluate("q", "Q", Entry { contestant: &x, answer: "a" }, Entry { contestant: &y, answer: "b" }, "g", 1, &mut gw)
            .unwrap();
        assert!(j.result.is_none());
    }

    #[test]
    fn agreement_rates() {
        let mut v = BTreeMap::new();
        v.insert("j1".to_owned(), vec![Some("x".into()), Some("y".into()), None, Some("x".into())]);
        v.insert("j2".to_owned(), vec![Some("x".into()), Some("x".into()), Some("x".into()), Some("x".into())]);
        let a = judge_agreement(&v);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].compared, 3);
        assert!((a[0].rate.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
