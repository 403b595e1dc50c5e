//! Fully resolved run configuration: defaults, then an optional config
//! file, then explicit flags.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use hls_core::corpus::SplitSpec;
use hls_core::metrics::{TopkPopulation, DEFAULT_SWEEP};
use hls_core::pretrain::{MspReduction, MASK_FRACTION};
use hls_core::se_encoder::ProgramPooling;
use hls_core::segmenter::check_m_len;
use hls_core::te_encoder::EncoderConfig;
use hls_core::token2statement::T2SKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const M_LENS: [usize; 3] = [512, 1024, 2048];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Preset {
    /// 6 layers, hidden 768, 12 heads.
    #[serde(rename = "paper-6x768x12")]
    #[value(name = "paper-6x768x12")]
    Paper,
    /// 2 layers, hidden 64, 4 heads.
    #[serde(rename = "desk-2x64x4")]
    #[value(name = "desk-2x64x4")]
    Desk,
}

impl Preset {
    pub fn encoder(self, vocab_size: usize) -> EncoderConfig {
        match self {
            Preset::Paper => EncoderConfig::paper(vocab_size),
            Preset::Desk => EncoderConfig::desk(vocab_size),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Evaluation,
    Test,
    All,
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Evaluation => "evaluation",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub corpus: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub m_len: usize,
    pub t2s: T2SKind,
    pub pooling: ProgramPooling,
    pub preset: Preset,
    pub dropout: Option<f64>,
    pub seed: u64,
    pub mlm_steps: usize,
    pub steps: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub k: Vec<f64>,
    pub split_train: f64,
    pub split_evaluation: f64,
    pub split_test: f64,
    pub stratified: bool,
    pub eval_split: EvalSplit,
    pub id: Option<String>,
    pub threshold: f64,
    pub lambda_fine: f64,
    pub class_weights: bool,
    pub freeze_encoder: bool,
    pub patience: Option<usize>,
    pub resume: bool,
    pub population: TopkPopulation,
    pub head_hidden: Option<usize>,
    pub max_vocab: usize,
    pub min_freq: usize,
    pub checkpoint_every: usize,
    pub mask_fraction: f64,
    pub msp_reduction: MspReduction,
    pub feed_statement: bool,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        RunConfig {
            command: command.to_string(),
            corpus: None,
            input: None,
            checkpoint: None,
            out: None,
            m_len: 512,
            t2s: T2SKind::Average,
            pooling: ProgramPooling::Summary,
            preset: Preset::Desk,
            dropout: None,
            seed: 0,
            mlm_steps: 0,
            steps: 300,
            epochs: 10,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            k: DEFAULT_SWEEP.to_vec(),
            split_train: 0.8,
            split_evaluation: 0.1,
            split_test: 0.1,
            stratified: false,
            eval_split: EvalSplit::Test,
            id: None,
            threshold: 0.5,
            lambda_fine: 1.0,
            class_weights: false,
            freeze_encoder: false,
            patience: None,
            resume: false,
            population: TopkPopulation::AllVulnerable,
            head_hidden: None,
            max_vocab: 50_000,
            min_freq: 1,
            checkpoint_every: 0,
            mask_fraction: MASK_FRACTION,
            msp_reduction: MspReduction::Sum,
            feed_statement: false,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            evaluation: self.split_evaluation,
            test: self.split_test,
            seed: self.seed,
            stratified: self.stratified,
        }
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        let mut e = self.preset.encoder(vocab_size);
        if let Some(p) = self.dropout {
            e.dropout = p;
        }
        e
    }

    pub fn validate(&self) -> Result<(), CliError> {
        check_m_len(self.m_len).map_err(CliError::usage)?;
        if !M_LENS.contains(&self.m_len) {
            return Err(CliError::Usage(format!("--m-len must be one of {M_LENS:?}, got {}", self.m_len)));
        }
        self.split_spec().validate().map_err(CliError::usage)?;
        if self.batch == 0 {
            return Err(CliError::Usage("--batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CliError::Usage(format!("--lr must be a non-negative number, got {}", self.lr)));
        }
        if self.k.is_empty() || self.k.iter().any(|&k| !(k > 0.0 && k <= 100.0)) {
            return Err(CliError::Usage(format!("--k values must lie in (0, 100], got {:?}", self.k)));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(CliError::Usage(format!("mask fraction must lie in (0, 1], got {}", self.mask_fraction)));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(CliError::Usage(format!("--dropout must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{} requires --out", self.command)))
    }

    pub fn corpus_path(&self) -> Result<&Path, CliError> {
        self.corpus
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{} requires --corpus", self.command)))
    }

    pub fn checkpoint_path(&self) -> Result<&Path, CliError> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{} requires --checkpoint", self.command)))
    }

    /// Writes `config.json` into the output directory.
    pub fn echo(&self) -> Result<(), CliError> {
        let dir = self.out_dir()?;
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(dir.join("config.json"), text + "\n")
            .map_err(|e| CliError::Runtime(format!("writing config echo: {e}")))
    }
}

/// Flags shared by every subcommand. Unset flags keep the value from
/// `--config` or the default.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// Read settings from a previously echoed config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus in JSONL form.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory to start from or evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Token capacity per function: 512, 1024 or 2048.
    #[arg(long)]
    pub m_len: Option<usize>,
    /// Token2Statement strategy: average, weighted or attention.
    #[arg(long)]
    pub t2s: Option<T2SKind>,
    /// Program vector pooling: summary or mean.
    #[arg(long)]
    pub pooling: Option<ProgramPooling>,
    #[arg(long = "strategy-preset", value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// MLM steps run before the MSP steps.
    #[arg(long)]
    pub mlm_steps: Option<usize>,
    /// MSP pretraining steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Top-k% values, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<f64>>,
    /// Train/evaluation/test fractions, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub stratified: bool,
    /// Split scored by evaluate.
    #[arg(long, value_enum)]
    pub eval_split: Option<EvalSplit>,
    /// Sample id for explain.
    #[arg(long)]
    pub id: Option<String>,
    /// Coarse decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lambda_fine: Option<f64>,
    /// Inverse-frequency class weights on the coarse loss.
    #[arg(long)]
    pub class_weights: bool,
    /// Train only the detection heads.
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Early stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Continue from the training state stored in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Top-k% population: all_vulnerable or coarse_positive.
    #[arg(long)]
    pub population: Option<TopkPopulation>,
    /// Hidden width of the detection heads (defaults to the model width).
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Save a pretraining checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub mask_fraction: Option<f64>,
    /// MSP loss reduction: sum or token_mean.
    #[arg(long)]
    pub msp_reduction: Option<MspReduction>,
    #[arg(long)]
    pub feed_statement: bool,
    /// Input file for convert.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

macro_rules! overlay {
    ($cfg:ident, $flags:ident: $($field:ident),*) => {
        $(if let Some(v) = $flags.$field.clone() {
            $cfg.$field = v.into();
        })*
    };
}

impl Flags {
    pub fn resolve(&self, command: &str) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
                let mut c: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("parsing {}: {e}", path.display())))?;
                if c.command != command {
                    log::warn!("config was echoed by {:?}; running {command:?}", c.command);
                    c.command = command.to_string();
                }
                c
            }
            None => RunConfig::defaults(command),
        };
        overlay!(cfg, self: corpus, checkpoint, out, m_len, t2s, pooling, preset, seed, mlm_steps, steps, epochs,
            batch, lr, weight_decay, k, eval_split, threshold, lambda_fine, population, max_vocab, min_freq,
            checkpoint_every, mask_fraction, msp_reduction, input);
        if let Some(v) = self.dropout {
            cfg.dropout = Some(v);
        }
        if let Some(v) = &self.id {
            cfg.id = Some(v.clone());
        }
        if let Some(v) = self.patience {
            cfg.patience = Some(v);
        }
        if let Some(v) = self.head_hidden {
            cfg.head_hidden = Some(v);
        }
        if let Some(s) = &self.split {
            let [a, b, c] = s[..] else {
                return Err(CliError::Usage(format!("--split takes three fractions, got {s:?}")));
            };
            (cfg.split_train, cfg.split_evaluation, cfg.split_test) = (a, b, c);
        }
        cfg.stratified |= self.stratified;
        cfg.class_weights |= self.class_weights;
        cfg.freeze_encoder |= self.freeze_encoder;
        cfg.feed_statement |= self.feed_statement;
        // Resuming is a property of one invocation, not of the echoed run.
        cfg.resume = self.resume;
        cfg.validate()?;
        Ok(cfg)
    }
}
