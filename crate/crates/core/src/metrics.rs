//! Human-normalized score aggregates over published Atari score tables and a
//! report comparing them with the published values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// `(score - random) / (human - random)`.
pub fn hns(score: f64, random: f64, human: f64) -> Result<f64> {
    if human == random {
        return Err(Error::invalid("human and random reference scores coincide"));
    }
    let v = (score - random) / (human - random);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("normalized score of {score}")));
    }
    Ok(v)
}

fn sorted(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{what} of an empty list")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    let v = sorted(values, "mean")?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(values: &[f64]) -> Result<f64> {
    let v = sorted(values, "median")?;
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Interquartile mean: drop `floor(n / 4)` values from each tail and average
/// the rest.
pub fn iqm(values: &[f64]) -> Result<f64> {
    let v = sorted(values, "iqm")?;
    let trim = v.len() / 4;
    let kept = &v[trim..v.len() - trim];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Result of a paired t-test on `a - b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Upper-tail probability of `t` (evidence that `a > b`).
    pub p_one_tailed: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("a paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d)?;
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::invalid("paired differences have zero variance"));
    }
    let t = m / (var / n).sqrt();
    let df = d.len() - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TTest { t, df, p_one_tailed: dist.sf(t) })
}

/// A score table keyed by game: one row per game, one value per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    /// Parse a CSV whose first column is `game` and whose other columns are
    /// numbers.
    pub fn parse_csv(name: &str, text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format(format!("{name}: {detail}"));
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.get(0) != Some("game") || header.len() < 2 {
            return Err(bad("header must start with `game` and name at least one column".into()));
        }
        let columns: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let game = record[0].to_string();
            let values = record
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("{game}: `{v}` is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{game}: non-finite score")));
            }
            rows.push((game, values));
        }
        if rows.is_empty() {
            return Err(bad("no rows".into()));
        }
        Ok(Self { columns, rows })
    }

    pub fn games(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|(g, _)| g.as_str())
    }

    pub fn row(&self, game: &str) -> Result<&[f64]> {
        self.rows.iter().find(|(g, _)| g == game).map(|(_, v)| v.as_slice()).ok_or_else(|| Error::Format(format!("no scores for {game}")))
    }

    /// Values of one column in row order.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name).ok_or_else(|| Error::Format(format!("no column {name}")))?;
        Ok(self.rows.iter().map(|(_, v)| v[j]).collect())
    }
}

/// Method columns of the mean-score table.
pub const METHODS: [&str; 6] = ["simple", "simple30", "curl", "otrainbow", "effrainbow", "evade"];
/// Methods with per-run score tables.
pub const RUN_METHODS: [&str; 5] = ["simple30", "evade", "interaction", "weighting", "translation"];

const BUNDLED: [(&str, &str); 7] = [
    ("baseline_scores.csv", include_str!("../data/scores/baseline_scores.csv")),
    ("mean_scores.csv", include_str!("../data/scores/mean_scores.csv")),
    ("runs_simple30.csv", include_str!("../data/scores/runs_simple30.csv")),
    ("runs_evade.csv", include_str!("../data/scores/runs_evade.csv")),
    ("runs_interaction.csv", include_str!("../data/scores/runs_interaction.csv")),
    ("runs_weighting.csv", include_str!("../data/scores/runs_weighting.csv")),
    ("runs_translation.csv", include_str!("../data/scores/runs_translation.csv")),
];

/// Reference scores, per-game mean scores of every method and per-run
/// scores of the methods that publish them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTables {
    /// Columns `human`, `random`.
    pub baseline: Table,
    /// One column per entry of [`METHODS`].
    pub means: Table,
    /// Keyed by entries of [`RUN_METHODS`].
    pub runs: BTreeMap<String, Table>,
}

impl ScoreTables {
    /// The tables compiled into the crate.
    pub fn bundled() -> Result<Self> {
        Self::from_texts(|file| Ok(BUNDLED.iter().find(|(f, _)| *f == file).expect("bundled table").1.to_string()))
    }

    /// Read `baseline_scores.csv`, `mean_scores.csv` and `runs_<method>.csv`
    /// from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_texts(|file| {
            let path = dir.join(file);
            std::fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
    }

    fn from_texts(mut read: impl FnMut(&str) -> Result<String>) -> Result<Self> {
        let mut table = |file: &str| Table::parse_csv(file, &read(file)?);
        let baseline = table("baseline_scores.csv")?;
        let means = table("mean_scores.csv")?;
        let mut runs = BTreeMap::new();
        for m in RUN_METHODS {
            runs.insert(m.to_string(), table(&format!("runs_{m}.csv"))?);
        }
        let tables = Self { baseline, means, runs };
        tables.validate()?;
        Ok(tables)
    }

    fn validate(&self) -> Result<()> {
        for c in ["human", "random"] {
            self.baseline.column(c)?;
        }
        for m in METHODS {
            self.means.column(m)?;
        }
        for game in self.means.games() {
            self.baseline.row(game)?;
        }
        for (m, t) in &self.runs {
            for game in t.games() {
                self.baseline.row(game)?;
            }
            if t.columns.is_empty() {
                return Err(Error::Format(format!("runs_{m}.csv has no run columns")));
            }
        }
        Ok(())
    }

    pub fn hns_of(&self, game: &str, score: f64) -> Result<f64> {
        let r = self.baseline.row(game)?;
        let (human, random) = (r[self.col("human")?], r[self.col("random")?]);
        hns(score, random, human)
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.baseline.columns.iter().position(|c| c == name).ok_or_else(|| Error::Format(format!("baseline table has no {name} column")))
    }

    /// Per-game HNS of a method's mean scores, in table order.
    pub fn mean_hns(&self, method: &str) -> Result<Vec<f64>> {
        let scores = self.means.column(method)?;
        self.means.games().zip(scores).map(|(g, s)| self.hns_of(g, s)).collect()
    }

    fn runs_of(&self, method: &str) -> Result<&Table> {
        self.runs.get(method).ok_or_else(|| Error::Format(format!("no per-run table for {method}")))
    }

    /// HNS of every run of `method` on `games` (all its games if `None`).
    pub fn run_hns(&self, method: &str, games: Option<&[String]>) -> Result<Vec<f64>> {
        let t = self.runs_of(method)?;
        let games: Vec<String> = match games {
            Some(g) => g.to_vec(),
            None => t.games().map(String::from).collect(),
        };
        let mut out = Vec::new();
        for g in &games {
            for &s in t.row(g)? {
                out.push(self.hns_of(g, s)?);
            }
        }
        Ok(out)
    }

    /// Per-game HNS of the run-averaged scores of `method` on `games`.
    pub fn run_mean_hns(&self, method: &str, games: &[String]) -> Result<Vec<f64>> {
        let t = self.runs_of(method)?;
        games.iter().map(|g| self.hns_of(g, mean(t.row(g)?)?)).collect()
    }

    /// Games on which `a`'s mean score beats and loses to `b`'s.
    pub fn wins_losses(&self, a: &str, b: &str) -> Result<(usize, usize)> {
        let (x, y) = (self.means.column(a)?, self.means.column(b)?);
        Ok(count_wins(&x, &y))
    }
}

fn count_wins(a: &[f64], b: &[f64]) -> (usize, usize) {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    (wins, losses)
}

/// How a reproduced value is compared with its published counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// `|value - target| <= tolerance`.
    Within { target: f64, tolerance: f64 },
    /// `value <= bound`.
    AtMost { bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCheck {
    pub name: String,
    pub value: f64,
    pub target: Target,
}

impl MetricCheck {
    fn within(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, target: Target::Within { target, tolerance } }
    }

    pub fn pass(&self) -> bool {
        match self.target {
            // Small slack so that exactly-on-the-edge decimal values pass.
            Target::Within { target, tolerance } => (self.value - target).abs() <= tolerance + 1e-12,
            Target::AtMost { bound } => self.value <= bound,
        }
    }
}

/// Reproduced aggregates, their published targets and informational values
/// that have no target.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub checks: Vec<MetricCheck>,
    pub info: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(MetricCheck::pass)
    }

    pub fn check(&self, name: &str) -> Option<&MetricCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).chain(self.info.iter().map(|(n, _)| n.len())).max().unwrap_or(0);
        for c in &self.checks {
            let verdict = if c.pass() { "PASS" } else { "FAIL" };
            let target = match c.target {
                Target::Within { target, tolerance: 0.0 } => format!("= {target}"),
                Target::Within { target, tolerance } => format!("{target} +/- {tolerance}"),
                Target::AtMost { bound } => format!("<= {bound}"),
            };
            writeln!(f, "{verdict}  {:<width$}  {:>9.4}  target {target}", c.name, c.value)?;
        }
        for (name, value) in &self.info {
            writeln!(f, "info  {name:<width$}  {value:>9.4}")?;
        }
        Ok(())
    }
}

const TOL_MEAN: f64 = 0.005;
const TOL_IQM: f64 = 0.01;

/// Published win/loss counts of each baseline against the noisy-reward method.
const PUBLISHED_WINS: [(&str, usize, usize); 5] =
    [("simple", 7, 19), ("simple30", 3, 23), ("curl", 9, 17), ("otrainbow", 6, 20), ("effrainbow", 9, 17)];

/// Published 12-game ablation aggregates: (method, mean HNS, IQM).
const PUBLISHED_ABLATION: [(&str, f64, f64); 5] =
    [("simple30", 0.52, 0.22), ("interaction", 0.56, 0.29), ("weighting", 0.65, 0.26), ("translation", 0.69, 0.29), ("evade", 0.77, 0.40)];

/// Recompute the published aggregates from `tables` and compare each with
/// its published value.
pub fn reproduce_paper_metrics(tables: &ScoreTables) -> Result<MetricsReport> {
    let mut checks = Vec::new();
    let mut info = Vec::new();

    let evade = tables.mean_hns("evade")?;
    checks.push(MetricCheck::within("evade mean HNS", mean(&evade)?, 0.682, TOL_MEAN));
    checks.push(MetricCheck::within("evade median HNS", median(&evade)?, 0.267, TOL_MEAN));
    checks.push(MetricCheck::within("simple30 mean HNS", mean(&tables.mean_hns("simple30")?)?, 0.525, TOL_MEAN));
    checks.push(MetricCheck::within("curl mean HNS", mean(&tables.mean_hns("curl")?)?, 0.381, TOL_MEAN));
    checks.push(MetricCheck::within("evade IQM", iqm(&tables.run_hns("evade", None)?)?, 0.339, TOL_IQM));
    checks.push(MetricCheck::within("simple30 IQM", iqm(&tables.run_hns("simple30", None)?)?, 0.202, TOL_IQM));

    for (method, wins, losses) in PUBLISHED_WINS {
        let (w, l) = tables.wins_losses(method, "evade")?;
        checks.push(MetricCheck::within(format!("{method} wins vs evade"), w as f64, wins as f64, 0.0));
        checks.push(MetricCheck::within(format!("{method} losses vs evade"), l as f64, losses as f64, 0.0));
    }

    let games: Vec<String> = tables.runs_of("interaction")?.games().map(String::from).collect();
    for (method, hns_target, iqm_target) in PUBLISHED_ABLATION {
        let per_game = tables.run_mean_hns(method, &games)?;
        checks.push(MetricCheck::within(format!("ablation {method} mean HNS"), mean(&per_game)?, hns_target, TOL_IQM));
        let runs = tables.run_hns(method, Some(&games))?;
        checks.push(MetricCheck::within(format!("ablation {method} IQM"), iqm(&runs)?, iqm_target, TOL_IQM));
    }

    let test = paired_t_test(&evade, &tables.mean_hns("simple30")?)?;
    checks.push(MetricCheck { name: "paired t one-tailed p".into(), value: test.p_one_tailed, target: Target::AtMost { bound: 5e-3 } });
    info.push(("paired t statistic".into(), test.t));

    for method in METHODS {
        let per_game = tables.mean_hns(method)?;
        info.push((format!("{method} mean HNS"), mean(&per_game)?));
        info.push((format!("{method} median HNS"), median(&per_game)?));
    }
    info.push(("evade median HNS over all runs".into(), median(&tables.run_hns("evade", None)?)?));
    let s30 = tables.run_mean_hns("simple30", &games)?;
    for method in ["interaction", "weighting", "translation", "evade"] {
        let (w, l) = count_wins(&tables.run_mean_hns(method, &games)?, &s30);
        info.push((format!("ablation {method} wins vs simple30"), w as f64));
        info.push((format!("ablation {method} losses vs simple30"), l as f64));
    }
    Ok(MetricsReport { checks, info })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqm_trims_integer_quarters() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 100.0]).unwrap(), 4.5);
        assert_eq!(iqm(&[3.0]).unwrap(), 3.0);
        assert!(iqm(&[]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }

    #[test]
    fn t_test_reference_value() {
        let t = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert!((t.t - 4.2426).abs() < 1e-4);
        assert!((t.p_one_tailed - 0.00662).abs() < 1e-5);
        assert!(paired_t_test(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn csv_errors() {
        assert!(Table::parse_csv("x", "game,a\nFoo,abc\n").is_err());
        assert!(Table::parse_csv("x", "name,a\nFoo,1\n").is_err());
        assert!(Table::parse_csv("x", "game,a\n").is_err());
        assert_eq!(Table::parse_csv("x", "game,a\nFoo, 2\n").unwrap().row("Foo").unwrap(), &[2.0]);
    }

    #[test]
    fn bundled_tables_reproduce() {
        let report = reproduce_paper_metrics(&ScoreTables::bundled().unwrap()).unwrap();
        assert!(report.all_pass(), "{report}");
    }
}
