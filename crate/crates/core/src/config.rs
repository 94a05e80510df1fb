//! Flat run configuration.
//!
//! Every key has a default; values are layered as file < environment
//! (`MMREC_<KEY>`) < explicit overrides. The whole configuration serialises to
//! `key=value` lines and is embedded in every checkpoint and report.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "MMREC_";

macro_rules! choice {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

choice!(
    /// How the structural encoder's input vectors are produced.
    InitMethod {
        SdneLite => "sdne_lite",
        Spectral => "spectral",
        SeededRandom => "seeded_random",
    }
);

choice!(
    SemanticEncoder {
        HashedBow => "hashed_bow",
        Precomputed => "precomputed",
    }
);

choice!(
    Aggregation {
        Concat => "concat",
        Average => "average",
    }
);

choice!(
    /// Which item modalities feed the item representation.
    Modality {
        Both => "both",
        SemanticOnly => "semantic_only",
        StructuralOnly => "structural_only",
    }
);

choice!(
    Views {
        Multi => "multi",
        Single => "single",
    }
);

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(
    u64,
    usize,
    bool,
    InitMethod,
    SemanticEncoder,
    Aggregation,
    Modality,
    Views
);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }

    fn render(&self) -> String {
        // shortest representation that round-trips
        format!("{self:?}")
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident: $t:ty = $default:expr;)+) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $t,)+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default,)+ }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),+];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($field) => {
                        self.$field = <$t as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
                    })+
                    _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($field) => Some(self.$field.render()),)+
                    _ => None,
                }
            }

            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(
                    s.push_str(stringify!($field));
                    s.push('=');
                    s.push_str(&self.$field.render());
                    s.push('\n');
                )+
                s
            }
        }
    };
}

run_config! {
    /// Root seed; every random stream is derived from it.
    seed: u64 = 0;
    /// Users with fewer ratings are dropped.
    min_records: usize = 10;
    train_fraction: f64 = 0.7;
    /// Share of the train side held out for validation.
    validation_fraction: f64 = 0.1;
    /// Two items are linked when they share more than this many entities.
    shared_threshold: usize = 2;

    /// Length of each user's prefer and dislike samples.
    history_size: usize = 10;
    /// Negatives per positive.
    negatives: usize = 4;
    batch_size: usize = 16;
    learning_rate: f64 = 1e-3;
    adam_beta1: f64 = 0.9;
    adam_beta2: f64 = 0.999;
    adam_epsilon: f64 = 1e-8;
    epochs: usize = 20;
    /// Epochs without validation improvement before stopping; 0 disables.
    patience: usize = 5;
    /// Draw fresh history samples every epoch instead of once per run.
    resample_histories: bool = false;

    init_method: InitMethod = InitMethod::SdneLite;
    init_dim: usize = 256;
    sdne_epochs: usize = 200;
    sdne_learning_rate: f64 = 1e-2;
    /// Weight of the first-order proximity penalty.
    sdne_first_order: f64 = 1.0;
    /// Extra reconstruction weight on observed edges.
    sdne_edge_weight: f64 = 5.0;
    gat_heads_concat: usize = 12;
    gat_head_dim: usize = 32;
    gat_heads_average: usize = 2;
    structural_dim: usize = 256;
    gat_dropout: f64 = 0.4;
    leaky_slope: f64 = 0.2;
    /// Keep the graph-attention weights at their initial values.
    freeze_structural: bool = false;

    semantic_encoder: SemanticEncoder = SemanticEncoder::HashedBow;
    text_length: usize = 50;
    hash_buckets: usize = 32768;
    /// Width of the hashed sentence vectors.
    sentence_dim: usize = 256;
    semantic_dim: usize = 256;

    aggregation: Aggregation = Aggregation::Concat;
    modality: Modality = Modality::Both;
    views: Views = Views::Multi;
    attention_heads: usize = 4;
    attention_dropout: f64 = 0.3;
    /// Share self-attention weights between the two views.
    tie_views: bool = false;
    w1_init: f64 = 1.0;
    w2_init: f64 = -1.0;
}

impl RunConfig {
    /// Small dimensions for experiments that must finish in minutes on one
    /// core. Layer counts, head counts of the first graph layer and every
    /// sampling and dropout setting keep their defaults.
    pub fn desk() -> Self {
        RunConfig {
            init_dim: 16,
            sdne_epochs: 150,
            gat_heads_concat: 4,
            gat_head_dim: 4,
            structural_dim: 8,
            hash_buckets: 1024,
            sentence_dim: 16,
            semantic_dim: 8,
            attention_heads: 2,
            learning_rate: 5e-3,
            epochs: 15,
            patience: 4,
            ..RunConfig::default()
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", no + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies every `MMREC_<KEY>` variable; unknown keys under the prefix are
    /// rejected.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|key| (key.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, &v).map_err(|e| {
                let detail = match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                };
                Error::Config(format!(
                    "from {ENV_PREFIX}{}: {detail}",
                    k.to_ascii_uppercase()
                ))
            })?;
        }
        Ok(())
    }

    /// `base`, then `file`, then the environment, then `overrides`.
    pub fn layered<I, K, V>(
        base: RunConfig,
        file: Option<&Path>,
        env: I,
        overrides: &[(String, String)],
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut cfg = base;
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the fused item vector.
    pub fn item_dim(&self) -> usize {
        match (self.modality, self.aggregation) {
            (Modality::SemanticOnly, _) => self.semantic_dim,
            (Modality::StructuralOnly, _) => self.structural_dim,
            (Modality::Both, Aggregation::Concat) => self.semantic_dim + self.structural_dim,
            (Modality::Both, Aggregation::Average) => self.semantic_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("min_records", self.min_records),
            ("history_size", self.history_size),
            ("negatives", self.negatives),
            ("batch_size", self.batch_size),
            ("init_dim", self.init_dim),
            ("gat_heads_concat", self.gat_heads_concat),
            ("gat_head_dim", self.gat_head_dim),
            ("gat_heads_average", self.gat_heads_average),
            ("structural_dim", self.structural_dim),
            ("text_length", self.text_length),
            ("hash_buckets", self.hash_buckets),
            ("sentence_dim", self.sentence_dim),
            ("semantic_dim", self.semantic_dim),
            ("attention_heads", self.attention_heads),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be at least 1"));
            }
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        for (k, v) in [
            ("gat_dropout", self.gat_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            ));
        }
        if self.learning_rate <= 0.0 || self.sdne_learning_rate <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_epsilon <= 0.0
        {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        if self.modality == Modality::Both
            && self.aggregation == Aggregation::Average
            && self.semantic_dim != self.structural_dim
        {
            return bad(format!(
                "average aggregation needs semantic_dim = structural_dim, got {} and {}",
                self.semantic_dim, self.structural_dim
            ));
        }
        let d = self.item_dim();
        if !d.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "attention_heads = {} must divide the item dimension {d}",
                self.attention_heads
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.history_size, c.negatives, c.batch_size), (10, 4, 16));
        assert_eq!((c.gat_heads_concat, c.gat_heads_average), (12, 2));
        assert_eq!(
            (c.semantic_dim, c.structural_dim, c.item_dim()),
            (256, 256, 512)
        );
        assert_eq!((c.gat_dropout, c.attention_dropout), (0.4, 0.3));
        assert_eq!(c.text_length, 50);
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::desk();
        c.learning_rate = 0.1 + 0.2;
        c.views = Views::Single;
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("learning_rat=0.1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rat"), "{err}");
        let err = RunConfig::default()
            .apply_env([("MMREC_NOPE", "1")])
            .unwrap_err()
            .to_string();
        assert!(err.contains("MMREC_NOPE"), "{err}");
    }

    #[test]
    fn layering_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "epochs=3\nnegatives = 2 # comment\nbatch_size=8\n").unwrap();
        let env = [
            ("MMREC_EPOCHS", "4"),
            ("MMREC_BATCH_SIZE", "9"),
            ("HOME", "/x"),
        ];
        let overrides = vec![("epochs".to_string(), "5".to_string())];
        let c = RunConfig::layered(RunConfig::default(), Some(&file), env, &overrides).unwrap();
        assert_eq!((c.epochs, c.negatives, c.batch_size), (5, 2, 9));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("gat_dropout", "abc").is_err());
        assert!(c.set("aggregation", "sum").is_err());
        c.set("gat_dropout", "1.0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.attention_heads = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.aggregation = Aggregation::Average;
        c.structural_dim = 128;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("256") && msg.contains("128"), "{msg}");
    }
}
