use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{QbmError, Result};

/// Which feature blocks the classifier sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    /// Pooled pair representations only.
    Base,
    /// Base plus mutual coverage.
    BaseMc,
    /// Base plus the keyword bag representation and its coverage.
    BaseBr,
    /// Base plus the keyword bag representation without coverage.
    BaseBrNoCov,
    /// Both extensions.
    Qbm,
    /// Pairwise query-question classifier, aggregated per bag at ranking time.
    Qq,
    /// The bag's questions concatenated into one long question.
    BagCon,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Base,
        Variant::BaseMc,
        Variant::BaseBr,
        Variant::BaseBrNoCov,
        Variant::Qbm,
        Variant::Qq,
        Variant::BagCon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseMc => "base+mc",
            Variant::BaseBr => "base+br",
            Variant::BaseBrNoCov => "base+br_nocov",
            Variant::Qbm => "qbm",
            Variant::Qq => "qq",
            Variant::BagCon => "bagcon",
        }
    }

    /// Coverage between the query and the bag's own questions.
    pub fn bag_coverage(self) -> bool {
        matches!(self, Variant::BaseMc | Variant::Qbm)
    }

    /// Uses the keyword pseudo-question.
    pub fn keyword_rep(self) -> bool {
        matches!(self, Variant::BaseBr | Variant::BaseBrNoCov | Variant::Qbm)
    }

    /// Coverage between the query and the keyword pseudo-question.
    pub fn keyword_coverage(self) -> bool {
        matches!(self, Variant::BaseBr | Variant::Qbm)
    }

    /// Whether the token-weighting network exists.
    pub fn has_coverage_mlp(self) -> bool {
        self.bag_coverage() || self.keyword_coverage()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = QbmError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                QbmError::Config(format!("unknown variant `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = QbmError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Network shape. Defaults follow the reference setup: sequences of 20
/// tokens, bags of at most 5 questions and 300-dimensional embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub max_len: usize,
    pub max_bag: usize,
    pub embed_dim: usize,
    pub conv1_filters: usize,
    pub conv1_width: usize,
    pub conv2_filters: Vec<usize>,
    pub conv2_kernel: usize,
    pub coverage_hidden: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Length of the concatenated question for the bag-concatenation baseline.
    pub bagcon_len: usize,
    /// Keywords in the bag pseudo-question.
    pub top_terms: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_len: 20,
            max_bag: 5,
            embed_dim: 300,
            conv1_filters: 128,
            conv1_width: 3,
            conv2_filters: vec![32, 32],
            conv2_kernel: 3,
            coverage_hidden: 64,
            mlp_hidden: 256,
            dropout: 0.5,
            bagcon_len: 100,
            top_terms: 10,
            variant: Variant::Qbm,
        }
    }
}

/// Side of the grid left after `stages` rounds of 2×2 pooling.
fn pooled(len: usize, stages: usize) -> usize {
    (0..stages).fold(len, |n, _| n / 2)
}

impl ModelConfig {
    /// The small shape used for finite-difference checks.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            max_len: 6,
            max_bag: 2,
            embed_dim: 8,
            conv1_filters: 4,
            conv1_width: 3,
            conv2_filters: vec![2, 2],
            conv2_kernel: 3,
            coverage_hidden: 4,
            mlp_hidden: 6,
            dropout: 0.5,
            bagcon_len: 12,
            top_terms: 10,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_len", self.max_len),
            ("max_bag", self.max_bag),
            ("embed_dim", self.embed_dim),
            ("conv1_filters", self.conv1_filters),
            ("conv1_width", self.conv1_width),
            ("conv2_kernel", self.conv2_kernel),
            ("coverage_hidden", self.coverage_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("bagcon_len", self.bagcon_len),
            ("top_terms", self.top_terms),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(QbmError::Config(format!("{name} must be positive")));
            }
        }
        if self.conv1_width % 2 == 0 || self.conv2_kernel % 2 == 0 {
            return Err(QbmError::Config("convolution widths must be odd".into()));
        }
        if self.conv2_filters.is_empty() || self.conv2_filters.contains(&0) {
            return Err(QbmError::Config("conv2_filters needs at least one positive stage".into()));
        }
        if pooled(self.max_len.min(self.bagcon_len), self.conv2_filters.len()) == 0 {
            return Err(QbmError::Config(format!(
                "max_len {} too short for {} pooling stages",
                self.max_len,
                self.conv2_filters.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(QbmError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Sequence length the query and questions are encoded at.
    pub fn seq_len(&self) -> usize {
        match self.variant {
            Variant::BagCon => self.bagcon_len,
            _ => self.max_len,
        }
    }

    /// Length of the flattened interaction-grid encoding for sequences of `len`.
    pub fn grid_len(&self, len: usize) -> usize {
        let side = pooled(len, self.conv2_filters.len());
        self.conv2_filters.last().copied().unwrap_or(0) * side * side
    }

    /// Length of one pair representation `[h1; h2; h1-h2; h1*h2; hm]`.
    pub fn pair_len(&self) -> usize {
        4 * self.conv1_filters + self.grid_len(self.seq_len())
    }

    /// Length of the classifier input.
    pub fn feature_len(&self) -> usize {
        let r = self.pair_len();
        let l = self.max_len;
        match self.variant {
            Variant::Qq | Variant::BagCon => r,
            v => {
                let mut n = 2 * r;
                if v.bag_coverage() {
                    n += l + self.max_bag * l + 2;
                }
                if v.keyword_rep() {
                    n += r;
                }
                if v.keyword_coverage() {
                    n += 2 * l + 2;
                }
                n
            }
        }
    }

    /// Every parameter tensor's name and shape, in storage order.
    pub fn param_shapes(&self, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let k = self.conv2_kernel;
        let mut out = vec![
            ("embedding".to_string(), vec![vocab_size, d]),
            ("conv1.kernels".to_string(), vec![self.conv1_filters, self.conv1_width, d]),
            ("conv1.bias".to_string(), vec![self.conv1_filters]),
        ];
        let mut c_in = 1;
        for (i, &f) in self.conv2_filters.iter().enumerate() {
            out.push((format!("conv2.{i}.kernels"), vec![f, c_in, k, k]));
            out.push((format!("conv2.{i}.bias"), vec![f]));
            c_in = f;
        }
        if self.variant.has_coverage_mlp() {
            let h = self.coverage_hidden;
            out.push(("coverage.w1".to_string(), vec![d, h]));
            out.push(("coverage.b1".to_string(), vec![h]));
            out.push(("coverage.w2".to_string(), vec![h, 1]));
            out.push(("coverage.b2".to_string(), vec![1]));
        }
        let h = self.mlp_hidden;
        out.push(("head.w1".to_string(), vec![self.feature_len(), h]));
        out.push(("head.b1".to_string(), vec![h]));
        out.push(("head.w2".to_string(), vec![h, 2]));
        out.push(("head.b2".to_string(), vec![2]));
        out
    }

    pub fn param_count(&self, vocab_size: usize) -> usize {
        self.param_shapes(vocab_size)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
