//! Ablation studies: train the full method and variants with one component
//! removed under the same budget and seeds, and tabulate normalized
//! validation losses.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::agent::AgentDesign;
use crate::controller::Activation;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::trainer::{train, validate, TrainConfig, TrainOutcome, ValidationLosses};

/// Component removed by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Ablation {
    /// Adam replaced by SGD.
    Op,
    /// Sine activations replaced by tanh in both layers.
    Af,
    /// Batch size 1.
    Bs,
    /// No periodic input signal.
    Ps,
    /// No state vector input.
    Sv,
    /// No target input.
    Tg,
    /// Naive per-step velocity loss.
    Ld,
    /// Every hidden x output activation pair.
    ActivationGrid,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "OP" => Ablation::Op,
            "AF" => Ablation::Af,
            "BS" => Ablation::Bs,
            "PS" => Ablation::Ps,
            "SV" => Ablation::Sv,
            "TG" => Ablation::Tg,
            "LD" => Ablation::Ld,
            "ACT" => Ablation::ActivationGrid,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation `{s}` (expected OP, AF, BS, PS, SV, TG, LD or ACT)"
                )))
            }
        })
    }
}

impl Ablation {
    pub fn code(self) -> &'static str {
        match self {
            Ablation::Op => "OP",
            Ablation::Af => "AF",
            Ablation::Bs => "BS",
            Ablation::Ps => "PS",
            Ablation::Sv => "SV",
            Ablation::Tg => "TG",
            Ablation::Ld => "LD",
            Ablation::ActivationGrid => "ACT",
        }
    }

    /// Labelled configurations to train, the full method first.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let mut out = vec![("Full".to_string(), base.clone())];
        let mut cfg = base.clone();
        match self {
            Ablation::Op => cfg.optimizer = OptimizerConfig::sgd(),
            Ablation::Af => {
                cfg.activation_hidden = Activation::Tanh;
                cfg.activation_output = Activation::Tanh;
            }
            Ablation::Bs => cfg.batch_size = 1,
            Ablation::Ps => cfg.ablation.periodic_signal_on = false,
            Ablation::Sv => cfg.ablation.state_vector_on = false,
            Ablation::Tg => cfg.ablation.targets_on = false,
            Ablation::Ld => cfg.ablation.tailored_loss_on = false,
            Ablation::ActivationGrid => {
                out.clear();
                for h in Activation::ALL {
                    for o in Activation::ALL {
                        let mut c = base.clone();
                        c.activation_hidden = h;
                        c.activation_output = o;
                        out.push((format!("{h:?}-{o:?}"), c));
                    }
                }
                return out;
            }
        }
        out.push((format!("Full-{}", self.code()), cfg));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub normalized: ValidationLosses,
    /// Set when training stopped early; the losses then belong to the last
    /// good parameters.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<SeedResult>,
    pub task: Stat,
    pub run: Stat,
    pub jump: Stat,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub ablations: Vec<Ablation>,
    pub iterations: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Markdown table of mean ± std normalized validation losses.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Setting | Task | Run | Jump |");
        let _ = writeln!(s, "|---|---|---|---|");
        for r in &self.rows {
            let aborted = r.runs.iter().filter(|x| x.aborted.is_some()).count();
            let note = if aborted > 0 { format!(" ({aborted} aborted)") } else { String::new() };
            let _ = writeln!(
                s,
                "| {}{} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} |",
                r.label, note, r.task.mean, r.task.std, r.run.mean, r.run.std, r.jump.mean, r.jump.std
            );
        }
        s
    }
}

/// Trains one configuration and returns its final normalized validation losses.
pub fn train_and_score(cfg: &TrainConfig, design: &AgentDesign, out_dir: Option<&Path>) -> Result<SeedResult> {
    let final_losses = |o: &TrainOutcome, iterations: usize| -> Result<ValidationLosses> {
        match o.final_validation() {
            Some(v) if v.iteration == iterations => Ok(v.normalized),
            _ => validate(&o.params, cfg, design),
        }
    };
    match train(cfg, design, out_dir) {
        Ok(o) => Ok(SeedResult {
            seed: cfg.seed,
            normalized: final_losses(&o, cfg.iterations)?,
            aborted: None,
        }),
        Err(e) => {
            let partial = e.partial.ok_or(e.error)?;
            Ok(SeedResult {
                seed: cfg.seed,
                normalized: validate(&partial.params, cfg, design)?,
                aborted: Some(format!("stopped at iteration {}", e.iterations)),
            })
        }
    }
}

/// Trains the variants of every listed ablation once per seed, sharing the
/// full-method runs between them. Runs are written to
/// `out_dir/<label>/seed_<n>` when a directory is given.
pub fn run_ablation(
    base: &TrainConfig,
    design: &AgentDesign,
    ablations: &[Ablation],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() || ablations.is_empty() {
        return Err(Error::Config("an ablation needs at least one variant and one seed".into()));
    }
    let mut variants: Vec<(String, TrainConfig)> = Vec::new();
    for a in ablations {
        for (label, cfg) in a.variants(base) {
            if !variants.iter().any(|(l, _)| *l == label) {
                variants.push((label, cfg));
            }
        }
    }
    let mut rows = Vec::new();
    for (label, cfg) in variants {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let dir = out_dir.map(|d| d.join(&label).join(format!("seed_{seed}")));
            let result = train_and_score(&cfg, design, dir.as_deref())?;
            log::info!(
                "{label} seed {seed}: task {:.4} run {:.4} jump {:.4}",
                result.normalized.task,
                result.normalized.run,
                result.normalized.jump
            );
            runs.push(result);
        }
        let pick = |f: fn(&ValidationLosses) -> f64| Stat::of(&runs.iter().map(|r| f(&r.normalized)).collect::<Vec<_>>());
        rows.push(AblationRow {
            task: pick(|v| v.task),
            run: pick(|v| v.run),
            jump: pick(|v| v.jump),
            label,
            runs,
        });
    }
    Ok(AblationReport {
        ablations: ablations.to_vec(),
        iterations: base.iterations,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_and_round_trip() {
        for code in ["OP", "AF", "BS", "PS", "SV", "TG", "LD", "ACT"] {
            assert_eq!(code.parse::<Ablation>().unwrap().code(), code);
        }
        assert_eq!("ld".parse::<Ablation>().unwrap(), Ablation::Ld);
        assert!("XX".parse::<Ablation>().is_err());
    }

    #[test]
    fn variants_change_only_their_component() {
        let base = TrainConfig::default();
        let v = Ablation::Bs.variants(&base);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].1, base);
        assert_eq!(v[1].1, TrainConfig { batch_size: 1, ..base.clone() });
        let v = Ablation::Ld.variants(&base);
        assert!(!v[1].1.ablation.tailored_loss_on);
        assert_eq!(v[1].0, "Full-LD");
        let v = Ablation::Op.variants(&base);
        assert_eq!(v[1].1.optimizer, OptimizerConfig::sgd());
    }

    #[test]
    fn activation_grid_covers_all_pairs() {
        let v = Ablation::ActivationGrid.variants(&TrainConfig::default());
        assert_eq!(v.len(), 25);
        let mut pairs: Vec<_> = v.iter().map(|(_, c)| (c.activation_hidden, c.activation_output)).collect();
        pairs.dedup();
        assert_eq!(pairs.len(), 25);
    }

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }
}
