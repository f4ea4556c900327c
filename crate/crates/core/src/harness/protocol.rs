use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::harness::{evaluate, mean, train, EvalReport, TrainConfig};
use crate::loss::LossKind;
use crate::model::{AttentionFlags, ModelConfig, Vaanet};

/// Split protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// `runs` random stratified splits, ⌈2n_c/3⌉ of each class for training.
    Ve8 { runs: usize },
    /// The single train/test split recorded in the manifest.
    E6,
}

impl Protocol {
    /// Parses `ve8` or `e6`; `runs` only matters for `ve8`.
    pub fn parse(name: &str, runs: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ve8" => Ok(Self::Ve8 { runs }),
            "e6" => Ok(Self::E6),
            other => Err(Error::Config(format!("unknown protocol {other:?}; expected ve8 or e6"))),
        }
    }
}

/// Stratified split for run `run`: each class contributes `⌈2n_c/3⌉` random
/// members to the training side.
pub fn stratified_split(by_class: &[Vec<usize>], seed: u64, run: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Input(format!(
                "class {c} has {} samples; a 2/3 split needs at least 3",
                members.len()
            )));
        }
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let k = (2 * m.len()).div_ceil(3);
        train.extend_from_slice(&m[..k]);
        test.extend_from_slice(&m[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub train_per_class: Vec<usize>,
    pub test_per_class: Vec<usize>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub runs: Vec<RunReport>,
    /// Arithmetic mean of the per-run average accuracies.
    pub mean_accuracy: f64,
}

impl ProtocolReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>3}  {:>6}  {:>8}", "run", "seed", "accuracy");
        for r in &self.runs {
            let _ = writeln!(s, "{:>3}  {:>6}  {:>8.2}", r.run, r.seed, 100.0 * r.report.average);
        }
        let _ = writeln!(s, "mean {:>14.2}", 100.0 * self.mean_accuracy);
        s
    }
}

fn per_class(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    let mut counts = vec![0; data.manifest.taxonomy.len()];
    for &i in idx {
        counts[data.label(i)] += 1;
    }
    counts
}

/// Trains and evaluates under `protocol`. Run `r` of the repeated protocol
/// uses seed `cfg.seed + r` for its split, initialization and sampling.
/// With `out`, each run writes its artifacts under `run{r}/`.
pub fn run_protocol(protocol: Protocol, cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<ProtocolReport> {
    cfg.validate()?;
    let splits = match protocol {
        Protocol::Ve8 { runs } => {
            if runs == 0 {
                return Err(Error::Config("protocol needs at least one run".into()));
            }
            let by_class = data.manifest.by_class();
            (0..runs)
                .map(|r| {
                    let seed = cfg.seed.wrapping_add(r as u64);
                    stratified_split(&by_class, seed, r).map(|s| (seed, s))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Protocol::E6 => {
            let (train, test) = (data.manifest.split(Split::Train), data.manifest.split(Split::Test));
            if train.is_empty() || test.is_empty() {
                return Err(Error::Input("fixed-split protocol needs entries tagged train and test".into()));
            }
            vec![(cfg.seed, (train, test))]
        }
    };
    let mut runs = Vec::with_capacity(splits.len());
    for (r, (seed, (train_idx, test_idx))) in splits.into_iter().enumerate() {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let dir = out.map(|d| d.join(format!("run{r}")));
        let outcome = train(&run_cfg, data, &train_idx, &test_idx, dir.as_deref())?;
        runs.push(RunReport {
            run: r,
            seed,
            train_per_class: per_class(data, &train_idx),
            test_per_class: per_class(data, &test_idx),
            report: evaluate(&outcome.best, data, &test_idx, cfg.batch_size)?,
        });
    }
    let mean_accuracy = mean(&runs.iter().map(|r| r.report.average).collect::<Vec<_>>());
    Ok(ProtocolReport {
        protocol,
        runs,
        mean_accuracy,
    })
}

/// Trainable scalars per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub visual_backbone: usize,
    pub audio_backbone: usize,
    pub spatial: usize,
    pub channel: usize,
    pub temporal: usize,
    pub audio_attention: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn of(model: &Vaanet) -> Self {
        Self {
            visual_backbone: model.count_params("visual/"),
            audio_backbone: model.count_params("audio/"),
            spatial: model.count_params("attention/spatial/"),
            channel: model.count_params("attention/channel/"),
            temporal: model.count_params("attention/temporal/"),
            audio_attention: model.count_params("attention/audio/"),
            head: model.count_params("head/"),
            total: model.store.num_scalars(),
        }
    }

    pub fn visual_attention(&self) -> usize {
        self.spatial + self.channel + self.temporal
    }
}

/// Attention parameter counts implied by the flags alone:
/// `(spatial, channel, temporal, audio)`.
pub fn expected_attention_params(cfg: &ModelConfig) -> Result<[usize; 4]> {
    let f = cfg.attention;
    let mut out = [0; 4];
    if f.vs {
        let [h, w, n] = cfg.visual_shape()?;
        let m = h * w;
        out[0] = m * m + n;
        if f.vcw {
            out[1] = n * n + m;
        }
        if f.vt {
            out[2] = cfg.t * cfg.t + n;
        }
    }
    if f.at {
        out[3] = cfg.t * cfg.t + cfg.audio_shape()?[2];
    }
    Ok(out)
}

fn check_counts(cfg: &ModelConfig, c: &ParamCounts) -> Result<()> {
    let want = expected_attention_params(cfg)?;
    let got = [c.spatial, c.channel, c.temporal, c.audio_attention];
    let streams_ok = (c.visual_backbone > 0) == cfg.attention.vs && (c.audio_backbone > 0) == cfg.attention.at;
    if got != want || !streams_ok {
        return Err(Error::Contract(format!(
            "{}: attention parameters {got:?}, expected {want:?}; backbones visual {} audio {}",
            cfg.attention, c.visual_backbone, c.audio_backbone
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub attention: String,
    pub loss: LossKind,
    pub seed: u64,
    pub params: ParamCounts,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub classes: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// One line per configuration: per-class accuracies and the average.
    pub fn to_text(&self) -> String {
        let cw = self.classes.iter().map(String::len).max().unwrap_or(0).max(6);
        let aw = self.rows.iter().map(|r| r.attention.len()).max().unwrap_or(0).max(9);
        let mut s = String::new();
        let _ = write!(s, "{:<aw$}  {:<4}  {:>8}", "attention", "loss", "params");
        for c in &self.classes {
            let _ = write!(s, "  {c:>cw$}");
        }
        let _ = writeln!(s, "  {:>cw$}", "avg");
        for r in &self.rows {
            let loss = match r.loss {
                LossKind::Ce => "CE",
                LossKind::Pcce => "PCCE",
            };
            let _ = write!(s, "{:<aw$}  {loss:<4}  {:>8}", r.attention, r.params.total);
            for a in &r.report.per_class {
                let cell = a.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
                let _ = write!(s, "  {cell:>cw$}");
            }
            let _ = writeln!(s, "  {:>cw$.2}", 100.0 * r.report.average);
        }
        s
    }
}

/// Trains and evaluates every attention configuration under CE and PCCE,
/// all with `base.seed`. Each row's parameter counts are checked against
/// its flags before training.
pub fn ablation_matrix(
    base: &TrainConfig,
    data: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for flags in AttentionFlags::ablation_rows() {
        for loss in [LossKind::Ce, LossKind::Pcce] {
            let cfg = TrainConfig {
                model: base.model.clone().with_attention(flags),
                loss,
                ..base.clone()
            };
            let params = ParamCounts::of(&Vaanet::new(cfg.model.clone(), cfg.seed)?);
            check_counts(&cfg.model, &params)?;
            let name = format!("{flags}_{loss:?}").to_ascii_lowercase().replace('+', "-");
            let dir = out.map(|d| d.join(name));
            let outcome = train(&cfg, data, train_idx, test_idx, dir.as_deref())?;
            rows.push(AblationRow {
                attention: flags.to_string(),
                loss,
                seed: cfg.seed,
                params,
                report: evaluate(&outcome.best, data, test_idx, cfg.batch_size)?,
            });
        }
    }
    Ok(AblationTable {
        classes: data.manifest.taxonomy.classes().to_vec(),
        rows,
    })
}
