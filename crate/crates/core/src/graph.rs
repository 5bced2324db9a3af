//! Batch similarity graphs built from precomputed graph-space embeddings.
//!
//! The combined graph `G` is turned into a row-stochastic soft target with a
//! plain row softmax (no temperature).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{norm2, row_softmax, DenseMatrix};

/// Entries of `G_tt + G_ii` smaller than this in magnitude make the harmonic
/// mean undefined; those entries are set to zero.
pub const HARMONIC_GUARD: f64 = 1e-8;

const NORM_TOLERANCE: f64 = 1e-9;

/// Precomputed, unit-norm caption and image embeddings for one batch.
#[derive(Debug, Clone)]
pub struct GraphEmbeddings {
    text: DenseMatrix,
    image: DenseMatrix,
}

impl GraphEmbeddings {
    pub fn new(text: DenseMatrix, image: DenseMatrix) -> Result<Self> {
        if text.shape() != image.shape() {
            return Err(Error::DimensionMismatch(format!(
                "text embeddings are {:?} but image embeddings are {:?}",
                text.shape(),
                image.shape()
            )));
        }
        for (name, m) in [("text", &text), ("image", &image)] {
            for i in 0..m.rows() {
                let n = norm2(m.row(i));
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::Domain(format!(
                        "{name} graph embedding {i} has norm {n}"
                    )));
                }
            }
        }
        Ok(Self { text, image })
    }

    pub fn text(&self) -> &DenseMatrix {
        &self.text
    }

    pub fn image(&self) -> &DenseMatrix {
        &self.image
    }

    pub fn len(&self) -> usize {
        self.text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.text.rows() == 0
    }

    /// Same embeddings with the batch reordered.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            text: self.text.select_rows(order),
            image: self.image.select_rows(order),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombinationStrategy {
    /// Mean of all four intra- and cross-modal graphs.
    #[default]
    CrossModality,
    /// `½(G_tt + G_ii)`.
    ArithmeticMean,
    /// `2·G_tt·G_ii / (G_tt + G_ii)`, elementwise.
    HarmonicMean,
    CaptionOnly,
    ImageOnly,
}

impl CombinationStrategy {
    pub const ALL: [CombinationStrategy; 5] = [
        Self::CrossModality,
        Self::ArithmeticMean,
        Self::HarmonicMean,
        Self::CaptionOnly,
        Self::ImageOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossModality => "cross",
            Self::ArithmeticMean => "arith",
            Self::HarmonicMean => "harm",
            Self::CaptionOnly => "caption",
            Self::ImageOnly => "image",
        }
    }
}

impl fmt::Display for CombinationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CombinationStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                format!("unknown strategy `{s}` (expected cross, arith, harm, caption or image)")
            })
    }
}

/// The four component graphs of a batch.
#[derive(Debug, Clone)]
pub struct ComponentGraphs {
    pub text_text: DenseMatrix,
    pub image_image: DenseMatrix,
    pub text_image: DenseMatrix,
    pub image_text: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    pub graph: DenseMatrix,
    /// Row softmax of `graph`.
    pub target: DenseMatrix,
    pub strategy: CombinationStrategy,
}

impl SimilarityGraph {
    pub fn len(&self) -> usize {
        self.graph.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.rows() == 0
    }
}

pub fn component_graphs(emb: &GraphEmbeddings) -> ComponentGraphs {
    let (t, i) = (&emb.text, &emb.image);
    // Shapes were validated by GraphEmbeddings::new.
    let text_image = t.matmul_transposed(i).expect("validated shapes");
    ComponentGraphs {
        text_text: t.matmul_transposed(t).expect("validated shapes"),
        image_image: i.matmul_transposed(i).expect("validated shapes"),
        image_text: text_image.transpose(),
        text_image,
    }
}

pub fn combine(parts: &ComponentGraphs, strategy: CombinationStrategy) -> Result<SimilarityGraph> {
    let n = parts.text_text.rows();
    for m in [
        &parts.text_text,
        &parts.image_image,
        &parts.text_image,
        &parts.image_text,
    ] {
        if m.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "component graphs must all be {n}x{n}, got {:?}",
                m.shape()
            )));
        }
    }
    let (tt, ii, ti, it) = (
        &parts.text_text,
        &parts.image_image,
        &parts.text_image,
        &parts.image_text,
    );
    let graph = match strategy {
        CombinationStrategy::CrossModality => DenseMatrix::from_fn(n, n, |a, b| {
            0.25 * (tt.get(a, b) + ii.get(a, b) + ti.get(a, b) + it.get(a, b))
        }),
        CombinationStrategy::ArithmeticMean => {
            DenseMatrix::from_fn(n, n, |a, b| 0.5 * (tt.get(a, b) + ii.get(a, b)))
        }
        CombinationStrategy::HarmonicMean => DenseMatrix::from_fn(n, n, |a, b| {
            let (x, y) = (tt.get(a, b), ii.get(a, b));
            let s = x + y;
            if s.abs() < HARMONIC_GUARD {
                0.0
            } else {
                2.0 * x * y / s
            }
        }),
        CombinationStrategy::CaptionOnly => tt.clone(),
        CombinationStrategy::ImageOnly => ii.clone(),
    };
    let target = row_softmax(&graph);
    Ok(SimilarityGraph {
        graph,
        target,
        strategy,
    })
}

/// Component graphs and combination in one call.
pub fn build_graph(
    emb: &GraphEmbeddings,
    strategy: CombinationStrategy,
) -> Result<SimilarityGraph> {
    combine(&component_graphs(emb), strategy)
}

/// Summary of the matched-pair diagonal of `G_ti`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalReport {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub off_diagonal_mean: f64,
    /// Set when matched pairs are on average no more similar than unmatched
    /// ones, which usually means the pairing in the input is shuffled.
    pub pairing_suspect: bool,
}

pub fn self_pair_diagonal_check(
    graph: &SimilarityGraph,
    emb: &GraphEmbeddings,
) -> Result<DiagonalReport> {
    let n = emb.len();
    if graph.len() != n {
        return Err(Error::GraphBatchMismatch {
            graph: graph.len(),
            batch: n,
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("self_pair_diagonal_check"));
    }
    let ti = emb
        .text
        .matmul_transposed(&emb.image)
        .expect("validated shapes");
    let (mut min, mut max, mut diag_sum, mut off_sum) =
        (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0.0);
    for a in 0..n {
        for b in 0..n {
            let v = ti.get(a, b);
            if a == b {
                min = min.min(v);
                max = max.max(v);
                diag_sum += v;
            } else {
                off_sum += v;
            }
        }
    }
    let mean = diag_sum / n as f64;
    let off_diagonal_mean = if n > 1 {
        off_sum / (n * (n - 1)) as f64
    } else {
        f64::NEG_INFINITY
    };
    Ok(DiagonalReport {
        min,
        mean,
        max,
        off_diagonal_mean,
        pairing_suspect: mean <= off_diagonal_mean,
    })
}
