//! The three ablation protocols: component integration, sample-interval
//! sweep, and embedding-objective stability across seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Split};
use super::{evaluate_checkpoint, load_split, train_to_dir, Checkpoint};
use crate::error::IoContext;
use crate::losses::EmbeddingLoss;
use crate::syndata::{Corpus, Interval};
use crate::viseval::EvalSummary;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Components,
    TSweep,
    EmbeddingVariants,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Components => "components",
            Protocol::TSweep => "t_sweep",
            Protocol::EmbeddingVariants => "embedding_variants",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "components" => Ok(Protocol::Components),
            "t_sweep" => Ok(Protocol::TSweep),
            "embedding_variants" | "embedding" => Ok(Protocol::EmbeddingVariants),
            _ => Err(Error::Config(format!(
                "unknown protocol '{s}' (components|t_sweep|embedding_variants)"
            ))),
        }
    }
}

/// One cell of a protocol: the only settings an arm may change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub crossover: bool,
    pub embedding: EmbeddingLoss,
    pub interval: Interval,
}

impl Arm {
    fn new(label: &str, crossover: bool, embedding: EmbeddingLoss, interval: Interval) -> Self {
        Arm {
            label: label.to_string(),
            crossover,
            embedding,
            interval,
        }
    }

    /// Directory name shared by every protocol, so identical arms are
    /// trained once.
    pub fn key(&self) -> String {
        format!(
            "{}_{}_T{}",
            if self.crossover { "col" } else { "nocol" },
            self.embedding.name(),
            self.interval
        )
    }

    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.loss.crossover = self.crossover;
        c.loss.embedding = self.embedding;
        c.train.interval = self.interval;
        c.seed = seed;
        c.out = base.out.join("runs").join(format!("{}_seed{seed}", self.key()));
        c
    }
}

/// Baseline, COL only, GBE only, COL + GBE. Without GBE the embedding is
/// the pair-wise cross-entropy objective.
pub fn components_arms(base: &RunConfig) -> Vec<Arm> {
    let t = base.train.interval;
    vec![
        Arm::new("baseline", false, EmbeddingLoss::PairwiseCe, t),
        Arm::new("COL", true, EmbeddingLoss::PairwiseCe, t),
        Arm::new("GBE", false, EmbeddingLoss::GlobalFocal, t),
        Arm::new("COL+GBE", true, EmbeddingLoss::GlobalFocal, t),
    ]
}

/// Every interval of `ablate.intervals`, with and without crossover.
pub fn t_sweep_arms(base: &RunConfig) -> Vec<Arm> {
    let e = base.loss.embedding;
    let mut arms = Vec::new();
    for &t in &base.ablate.intervals {
        arms.push(Arm::new(&format!("T={t} COL"), true, e, t));
        arms.push(Arm::new(&format!("T={t} no COL"), false, e, t));
    }
    arms
}

pub fn embedding_arms(base: &RunConfig) -> Vec<Arm> {
    EmbeddingLoss::ALL
        .into_iter()
        .map(|e| Arm::new(e.name(), base.loss.crossover, e, base.train.interval))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seeds: Vec<u64>,
    pub summaries: Vec<EvalSummary>,
    pub median_ap: f64,
    /// Sample standard deviation of AP; absent with fewer than two seeds.
    pub std_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: Protocol,
    pub rows: Vec<ArmResult>,
    pub warnings: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&ArmResult> {
        self.rows.iter().find(|r| r.arm.label == label)
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

/// Trains and evaluates one (arm, seed), reusing a previous result when the
/// run directory holds one produced by an identical config.
pub fn run_arm(cfg: &RunConfig, train: &Corpus, val: &Corpus) -> Result<EvalSummary> {
    let summary_path = cfg.out.join("eval_val.json");
    let cfg_path = cfg.out.join("config.toml");
    if let (Ok(saved), Ok(summary)) = (fs::read_to_string(&cfg_path), fs::read(&summary_path)) {
        if RunConfig::from_toml(&saved).ok().as_ref() == Some(cfg) {
            if let Ok(s) = serde_json::from_slice(&summary) {
                return Ok(s);
            }
        }
    }
    let report = train_to_dir(cfg, train)?;
    let ckpt = Checkpoint::load(&report.checkpoint)?;
    let (summary, _) = evaluate_checkpoint(&ckpt, val, cfg)?;
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?).at(&summary_path)?;
    Ok(summary)
}

/// Runs `arms` over `seeds` training seeds (`cfg.seed`, `cfg.seed + 1`, …)
/// and summarizes validation AP per arm.
pub fn run_arms(cfg: &RunConfig, protocol: Protocol, arms: &[Arm], seeds: usize, train: &Corpus, val: &Corpus) -> Result<AblationReport> {
    let mut warnings = Vec::new();
    if seeds < 2 {
        warnings.push(format!("{seeds} seed(s) per arm: the standard deviation is undefined"));
    }
    let mut rows = Vec::new();
    for arm in arms {
        let seed_list: Vec<u64> = (0..seeds as u64).map(|s| cfg.seed + s).collect();
        let summaries = seed_list
            .iter()
            .map(|&s| run_arm(&arm.config(cfg, s), train, val))
            .collect::<Result<Vec<_>>>()?;
        let aps: Vec<f64> = summaries.iter().map(|s| s.ap).collect();
        rows.push(ArmResult {
            arm: arm.clone(),
            seeds: seed_list,
            median_ap: median(&aps),
            std_ap: sample_std(&aps),
            summaries,
        });
    }
    Ok(AblationReport {
        protocol,
        rows,
        warnings,
    })
}

/// Runs a protocol with `ablate.seeds` seeds; writes `<protocol>.json`, a
/// markdown table, and for the T sweep an SVG of AP against T, all under
/// `cfg.out`.
pub fn cmd_ablate(cfg: &RunConfig, protocol: Protocol) -> Result<AblationReport> {
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    let arms = match protocol {
        Protocol::Components => components_arms(cfg),
        Protocol::TSweep => t_sweep_arms(cfg),
        Protocol::EmbeddingVariants => embedding_arms(cfg),
    };
    let report = run_arms(cfg, protocol, &arms, cfg.ablate.seeds, &train, &val)?;
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    let base = cfg.out.join(protocol.name());
    let json = base.with_extension("json");
    fs::write(&json, serde_json::to_vec_pretty(&report)?).at(&json)?;
    let md = base.with_extension("md");
    fs::write(&md, render_table(&report)).at(&md)?;
    if protocol == Protocol::TSweep {
        let svg: PathBuf = base.with_extension("svg");
        fs::write(&svg, sweep_svg(&report)).at(&svg)?;
    }
    Ok(report)
}

pub fn render_table(report: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| arm | COL | embedding | T | AP (median) | σ | AP50 | AP75 | AR1 | AR10 | AP per seed |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|");
    for r in &report.rows {
        let med = |f: fn(&EvalSummary) -> f64| median(&r.summaries.iter().map(f).collect::<Vec<_>>());
        let per_seed: Vec<String> = r.summaries.iter().map(|s| format!("{:.1}", 100.0 * s.ap)).collect();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.1} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {} |",
            r.arm.label,
            if r.arm.crossover { "✓" } else { "" },
            r.arm.embedding.name(),
            r.arm.interval,
            100.0 * r.median_ap,
            r.std_ap.map_or("–".to_string(), |v| format!("{:.2}", 100.0 * v)),
            100.0 * med(|s| s.ap50),
            100.0 * med(|s| s.ap75),
            100.0 * med(|s| s.ar1),
            100.0 * med(|s| s.ar10),
            per_seed.join(" "),
        );
    }
    for w in &report.warnings {
        let _ = writeln!(s, "\nwarning: {w}");
    }
    s
}

/// Median AP against T, one polyline with and one without crossover.
/// `T = ∞` is drawn one slot to the right of the largest finite T.
pub fn sweep_svg(report: &AblationReport) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let mut ts: Vec<Interval> = report.rows.iter().map(|r| r.arm.interval).collect();
    ts.sort_by_key(|t| match t {
        Interval::Finite(v) => *v,
        Interval::Infinite => usize::MAX,
    });
    ts.dedup();
    let aps: Vec<f64> = report.rows.iter().map(|r| 100.0 * r.median_ap).collect();
    let lo = aps.iter().copied().fold(f64::INFINITY, f64::min).floor() - 1.0;
    let hi = aps.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
    let x_of = |t: &Interval| {
        let i = ts.iter().position(|u| u == t).unwrap_or(0) as f64;
        pad + i * (w - 2.0 * pad) / (ts.len().max(2) - 1) as f64
    };
    let y_of = |ap: f64| h - pad - (ap - lo) / (hi - lo).max(1e-9) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for t in &ts {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x_of(t), h - pad + 18.0, if *t == Interval::Infinite { "∞".to_string() } else { t.to_string() });
    }
    for tick in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.1}</text>"#, pad - 6.0, y_of(tick) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">sample interval T</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">AP (median)</text>"#, h / 2.0, h / 2.0);
    for (col, color, name) in [(true, "#d62728", "crossover"), (false, "#1f77b4", "no crossover")] {
        let mut rows: Vec<&ArmResult> = report.rows.iter().filter(|r| r.arm.crossover == col).collect();
        rows.sort_by(|a, b| x_of(&a.arm.interval).total_cmp(&x_of(&b.arm.interval)));
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", x_of(&r.arm.interval), y_of(100.0 * r.median_ap))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = if col { pad } else { pad + 16.0 };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{name}</text>"#, w - pad - 90.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Keys whose values differ between two configs.
    fn diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
        fn walk(prefix: &str, a: &toml::Value, b: &toml::Value, out: &mut Vec<String>) {
            match (a, b) {
                (toml::Value::Table(ta), toml::Value::Table(tb)) => {
                    for (k, va) in ta {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        match tb.get(k) {
                            Some(vb) => walk(&key, va, vb, out),
                            None => out.push(key),
                        }
                    }
                }
                _ if a != b => out.push(prefix.to_string()),
                _ => {}
            }
        }
        let mut out = Vec::new();
        walk("", &toml::Value::try_from(a).unwrap(), &toml::Value::try_from(b).unwrap(), &mut out);
        out
    }

    #[test]
    fn arms_differ_only_in_the_varied_factor() {
        let base = RunConfig::default();
        let allowed = |d: &[String], extra: &[&str]| {
            d.iter().all(|k| k == "out" || extra.contains(&k.as_str()))
        };
        let comps = components_arms(&base);
        assert_eq!(comps.len(), 4);
        for a in &comps {
            for b in &comps {
                let d = diff(&a.config(&base, 0), &b.config(&base, 0));
                assert!(allowed(&d, &["loss.crossover", "loss.embedding"]), "{d:?}");
            }
        }
        let sweep = t_sweep_arms(&base);
        assert_eq!(sweep.len(), 8);
        for a in &sweep {
            let d = diff(&a.config(&base, 0), &sweep[0].config(&base, 0));
            assert!(allowed(&d, &["loss.crossover", "train.interval"]), "{d:?}");
        }
        let emb = embedding_arms(&base);
        assert_eq!(emb.len(), 4);
        for a in &emb {
            let d = diff(&a.config(&base, 0), &emb[0].config(&base, 0));
            assert!(allowed(&d, &["loss.embedding"]), "{d:?}");
        }
        // seeds change nothing but the seed
        let d = diff(&comps[0].config(&base, 0), &comps[0].config(&base, 1));
        assert!(allowed(&d, &["seed"]), "{d:?}");
    }

    #[test]
    fn shared_arms_share_run_directories() {
        let base = RunConfig::default();
        let col_gbe = &components_arms(&base)[3];
        let sweep_inf = t_sweep_arms(&base).into_iter().find(|a| a.crossover && a.interval == Interval::Infinite).unwrap();
        assert_eq!(col_gbe.config(&base, 2), sweep_inf.config(&base, 2));
        let emb_ce = &embedding_arms(&base)[0];
        assert_eq!(emb_ce.config(&base, 1), components_arms(&base)[1].config(&base, 1));
    }

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(sample_std(&[1.0]), None);
        assert!((sample_std(&[1.0, 3.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn table_and_plot_render() {
        let base = RunConfig::default();
        let rows = t_sweep_arms(&base)
            .into_iter()
            .enumerate()
            .map(|(i, arm)| ArmResult {
                arm,
                seeds: vec![0],
                summaries: vec![EvalSummary {
                    ap: 0.1 + 0.01 * i as f64,
                    ..Default::default()
                }],
                median_ap: 0.1 + 0.01 * i as f64,
                std_ap: None,
            })
            .collect();
        let report = AblationReport {
            protocol: Protocol::TSweep,
            rows,
            warnings: vec!["1 seed(s) per arm: the standard deviation is undefined".into()],
        };
        let table = render_table(&report);
        assert_eq!(table.lines().filter(|l| l.starts_with("| T=")).count(), 8);
        assert!(table.contains("warning"));
        let svg = sweep_svg(&report);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 8);
        assert!(svg.contains("∞"));
    }

    #[test]
    fn protocol_names() {
        for p in [Protocol::Components, Protocol::TSweep, Protocol::EmbeddingVariants] {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert!("tables".parse::<Protocol>().is_err());
    }
}
