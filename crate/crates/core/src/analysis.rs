//! Post-hoc analytics over finished score files.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Sample;
use crate::error::AnalysisError;
use crate::lm_backend::Session;
use crate::scoring::{ppl_from_logprobs, Template};

/// Outcome of a single ordered comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    Win,
    Tie,
    Lose,
}

impl std::str::FromStr for Judgment {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "win" => Ok(Judgment::Win),
            "tie" => Ok(Judgment::Tie),
            "lose" => Ok(Judgment::Lose),
            _ => Err(AnalysisError::InvalidLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Win,
    Tie,
    Lose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseOutcome {
    pub order1: Judgment,
    pub order2: Judgment,
    pub combined: Outcome,
}

/// Combines the two presentation orders: a model wins only if it never
/// loses and wins at least once; a win against a loss is a tie.
pub fn combine_pairwise(order1: Judgment, order2: Judgment) -> Outcome {
    use Judgment::*;
    match (order1, order2) {
        (Win, Win) | (Win, Tie) | (Tie, Win) => Outcome::Win,
        (Tie, Tie) | (Win, Lose) | (Lose, Win) => Outcome::Tie,
        (Lose, Lose) | (Lose, Tie) | (Tie, Lose) => Outcome::Lose,
    }
}

/// `(wins - losses) / total + 1`, in `[0, 2]`.
pub fn winning_score(wins: u64, losses: u64, total: u64) -> Result<f64, AnalysisError> {
    if total == 0 {
        return Err(AnalysisError::NoComparisons);
    }
    if wins + losses > total {
        return Err(AnalysisError::CountsExceedTotal { wins, losses, total });
    }
    Ok((wins as f64 - losses as f64) / total as f64 + 1.0)
}

/// One line of a judgments file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub instruction_id: String,
    pub order1: String,
    pub order2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub wins: u64,
    pub ties: u64,
    pub losses: u64,
    pub total: u64,
    pub winning_score: f64,
}

pub fn pairwise_report(judgments: &[JudgmentRecord]) -> Result<PairwiseReport, AnalysisError> {
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for j in judgments {
        match combine_pairwise(j.order1.parse()?, j.order2.parse()?) {
            Outcome::Win => wins += 1,
            Outcome::Tie => ties += 1,
            Outcome::Lose => losses += 1,
        }
    }
    let total = wins + ties + losses;
    Ok(PairwiseReport {
        wins,
        ties,
        losses,
        total,
        winning_score: winning_score(wins, losses, total)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub sample_id: String,
    pub ifd: f64,
    pub selected: bool,
}

/// Instruction-following difficulty: the response's perplexity given its
/// prompt divided by its perplexity with no prompt at all.
pub fn ifd_score(session: &Session, sample: &Sample, template: Template) -> Result<f64, AnalysisError> {
    let conditioned = session.continuation_logprobs(&template.query(&sample.prompt()), &sample.response)?;
    let unconditioned = session.continuation_logprobs("", &sample.response)?;
    let ratio = ppl_from_logprobs(&conditioned.logprobs)? / ppl_from_logprobs(&unconditioned.logprobs)?;
    if !ratio.is_finite() {
        return Err(AnalysisError::NonFinite(sample.id.clone()));
    }
    Ok(ratio)
}

/// Floor applied to each group variance before the Welch statistic.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Two-sided Welch t-test of `a` against `b`. `None` when either group has
/// fewer than two values.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sample_variance(a).max(VARIANCE_FLOOR) / na;
    let vb = sample_variance(b).max(VARIANCE_FLOOR) / nb;
    let se2 = va + vb;
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Some(WelchTest { t, df, p_value })
}

/// Two-sided critical value of Student's t at level `alpha`.
pub fn t_critical(df: f64, alpha: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .map(|d| d.inverse_cdf(1.0 - alpha / 2.0))
        .unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std_dev: f64,
}

impl GroupSummary {
    fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        GroupSummary {
            n,
            mean: mean(values),
            median,
            std_dev: if n > 1 { sample_variance(values).sqrt() } else { 0.0 },
        }
    }
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `HISTOGRAM_BINS + 1` edges spanning the observed range.
    pub edges: Vec<f64>,
    pub full: Vec<usize>,
    pub selected: Vec<usize>,
}

impl Histogram {
    fn build(full: &[f64], selected: &[f64]) -> Self {
        let lo = full.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = full.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let edges = (0..=HISTOGRAM_BINS)
            .map(|i| if i == HISTOGRAM_BINS { hi } else { lo + width * i as f64 })
            .collect();
        let bin = |x: f64| {
            if width > 0.0 {
                (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            }
        };
        let count = |xs: &[f64]| {
            let mut c = vec![0; HISTOGRAM_BINS];
            for &x in xs {
                c[bin(x)] += 1;
            }
            c
        };
        Histogram {
            edges,
            full: count(full),
            selected: count(selected),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,full,selected\n");
        for i in 0..self.full.len() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.full[i],
                self.selected[i]
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub metric: String,
    pub full: GroupSummary,
    pub selected: GroupSummary,
    pub histogram: Histogram,
    /// Selected group against the full pool.
    pub welch: Option<WelchTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

/// Compares the selected ids' values with the whole pool.
pub fn distribution_report(
    metric: &str,
    values: &[(String, f64)],
    selected_ids: &HashSet<String>,
) -> Result<DistributionReport, AnalysisError> {
    let full: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    let selected: Vec<f64> = values
        .iter()
        .filter(|(id, _)| selected_ids.contains(id))
        .map(|(_, v)| *v)
        .collect();
    if full.is_empty() {
        return Err(AnalysisError::EmptyGroup("full"));
    }
    if selected.is_empty() {
        return Err(AnalysisError::EmptyGroup("selected"));
    }
    let welch = welch_t_test(&selected, &full);
    let notice = welch
        .is_none()
        .then(|| "t-test omitted: a group has fewer than 2 records".to_string());
    Ok(DistributionReport {
        metric: metric.to_string(),
        full: GroupSummary::of(&full),
        selected: GroupSummary::of(&selected),
        histogram: Histogram::build(&full, &selected),
        welch,
        notice,
    })
}

impl DistributionReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} distribution", self.metric);
        let _ = writeln!(out, "{:<10} {:>8} {:>14} {:>14} {:>14}", "group", "n", "mean", "median", "std");
        for (name, g) in [("full", &self.full), ("selected", &self.selected)] {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>14.6} {:>14.6} {:>14.6}",
                name, g.n, g.mean, g.median, g.std_dev
            );
        }
        match (&self.welch, &self.notice) {
            (Some(w), _) => {
                let _ = writeln!(out, "Welch t = {:.4}, df = {:.2}, p = {:.4}", w.t, w.df, w.p_value);
            }
            (None, Some(n)) => {
                let _ = writeln!(out, "{n}");
            }
            _ => {}
        }
        let max = self.histogram.full.iter().copied().max().unwrap_or(0).max(1);
        for i in 0..self.histogram.full.len() {
            let bar = "#".repeat(self.histogram.full[i] * 40 / max);
            let _ = writeln!(
                out,
                "[{:>12.5}, {:>12.5}) {:>6} {:>6} {bar}",
                self.histogram.edges[i], self.histogram.edges[i + 1], self.histogram.full[i], self.histogram.selected[i]
            );
        }
        out
    }
}
