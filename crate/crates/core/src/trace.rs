//! Gate-score traces: the T x E matrix of router logits a run consumes.
//!
//! Traces are generated synthetically (seeded, optionally skewed toward a
//! few hot experts) or imported from a small text format:
//!
//! ```text
//! moepim-trace v1
//! tokens 96
//! experts 16
//! prompt_len 32
//! <tokens lines of experts whitespace-separated reals>
//! ```
//!
//! Score lines use Rust's shortest round-trip float formatting, so
//! export -> import reproduces every bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use std::path::Path;
use thiserror::Error;

pub const TRACE_MAGIC: &str = "moepim-trace v1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot access trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trace parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("non-finite score at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("trace shape invalid: {0}")]
    Shape(String),
}

/// Borrowed view of a contiguous run of trace rows, the unit routing works on.
#[derive(Debug, Clone, Copy)]
pub struct ScoreBlock<'a> {
    data: &'a [f64],
    tokens: usize,
    experts: usize,
}

impl<'a> ScoreBlock<'a> {
    pub fn new(data: &'a [f64], tokens: usize, experts: usize) -> Self {
        assert_eq!(data.len(), tokens * experts, "score block shape mismatch");
        ScoreBlock { data, tokens, experts }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn row(&self, t: usize) -> &'a [f64] {
        &self.data[t * self.experts..(t + 1) * self.experts]
    }

    pub fn score(&self, t: usize, e: usize) -> f64 {
        self.data[t * self.experts + e]
    }
}

/// A full gate-score trace plus its prompt/generate split point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    tokens: usize,
    experts: usize,
    prompt_len: usize,
    scores: Vec<f64>,
}

impl Trace {
    pub fn new(
        tokens: usize,
        experts: usize,
        prompt_len: usize,
        scores: Vec<f64>,
    ) -> Result<Self, TraceError> {
        if tokens == 0 || experts == 0 {
            return Err(TraceError::Shape(format!(
                "tokens = {tokens}, experts = {experts}; both must be positive"
            )));
        }
        if prompt_len == 0 || prompt_len > tokens {
            return Err(TraceError::Shape(format!(
                "prompt_len = {prompt_len} outside 1..={tokens}"
            )));
        }
        if scores.len() != tokens * experts {
            return Err(TraceError::Shape(format!(
                "expected {} scores, got {}",
                tokens * experts,
                scores.len()
            )));
        }
        for (i, v) in scores.iter().enumerate() {
            if !v.is_finite() {
                return Err(TraceError::NonFinite { row: i / experts, col: i % experts });
            }
        }
        Ok(Trace { tokens, experts, prompt_len, scores })
    }

    /// Deterministic synthetic trace. Scores are i.i.d. standard normal plus
    /// a per-expert bias drawn from a heavy-tailed Cauchy with scale `skew`;
    /// skew 0 means no bias at all, so experts are exchangeable.
    pub fn generate(
        tokens: usize,
        experts: usize,
        prompt_len: usize,
        skew: f64,
        seed: u64,
    ) -> Result<Self, TraceError> {
        if skew < 0.0 || !skew.is_finite() {
            return Err(TraceError::Shape(format!("skew = {skew} must be finite and >= 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let biases: Vec<f64> = if skew == 0.0 {
            vec![0.0; experts]
        } else {
            let cauchy = Cauchy::new(0.0, skew)
                .map_err(|e| TraceError::Shape(format!("bad skew: {e}")))?;
            (0..experts).map(|_| cauchy.sample(&mut rng)).collect()
        };
        let mut scores = Vec::with_capacity(tokens * experts);
        for _ in 0..tokens {
            for &bias in &biases {
                let noise: f64 = StandardNormal.sample(&mut rng);
                scores.push(bias + noise);
            }
        }
        Trace::new(tokens, experts, prompt_len, scores)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.scores[t * self.experts..(t + 1) * self.experts]
    }

    /// View of rows `start..end`.
    pub fn block(&self, start: usize, end: usize) -> ScoreBlock<'_> {
        assert!(start <= end && end <= self.tokens, "block {start}..{end} out of range");
        ScoreBlock::new(
            &self.scores[start * self.experts..end * self.experts],
            end - start,
            self.experts,
        )
    }

    /// The prompt region as a block.
    pub fn prompt_block(&self) -> ScoreBlock<'_> {
        self.block(0, self.prompt_len)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(TRACE_MAGIC);
        out.push('\n');
        out.push_str(&format!("tokens {}\n", self.tokens));
        out.push_str(&format!("experts {}\n", self.experts));
        out.push_str(&format!("prompt_len {}\n", self.prompt_len));
        for t in 0..self.tokens {
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines
            .next()
            .ok_or_else(|| TraceError::Parse { line: 1, detail: "empty file".into() })?;
        if magic.trim() != TRACE_MAGIC {
            return Err(TraceError::Parse {
                line: 1,
                detail: format!("expected header '{TRACE_MAGIC}', found '{magic}'"),
            });
        }
        let mut read_field = |name: &str| -> Result<usize, TraceError> {
            let (idx, line) = lines.next().ok_or_else(|| TraceError::Parse {
                line: 0,
                detail: format!("missing '{name}' header line"),
            })?;
            let rest = line.strip_prefix(name).ok_or_else(|| TraceError::Parse {
                line: idx + 1,
                detail: format!("expected '{name} <value>', found '{line}'"),
            })?;
            rest.trim().parse().map_err(|e| TraceError::Parse {
                line: idx + 1,
                detail: format!("bad {name} value: {e}"),
            })
        };
        let tokens = read_field("tokens")?;
        let experts = read_field("experts")?;
        let prompt_len = read_field("prompt_len")?;

        let mut scores = Vec::with_capacity(tokens.saturating_mul(experts));
        let mut rows = 0usize;
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = 0usize;
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|e| TraceError::Parse {
                    line: idx + 1,
                    detail: format!("bad score '{tok}': {e}"),
                })?;
                if !v.is_finite() {
                    return Err(TraceError::NonFinite { row: rows, col: cols });
                }
                scores.push(v);
                cols += 1;
            }
            if cols != experts {
                return Err(TraceError::Parse {
                    line: idx + 1,
                    detail: format!("expected {experts} scores in row, found {cols}"),
                });
            }
            rows += 1;
        }
        if rows != tokens {
            return Err(TraceError::Shape(format!(
                "header promises {tokens} rows, file has {rows}"
            )));
        }
        Trace::new(tokens, experts, prompt_len, scores)
    }

    pub fn export(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_text()).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn import(path: &Path) -> Result<Self, TraceError> {
        let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}
