//! Retrieval and embedding-space quality metrics.
//!
//! Rankings sort candidates by descending similarity; equal scores are
//! ordered by ascending candidate index.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::ModelBatch;
use crate::numerics::{dot, norm2, DenseMatrix};

/// The K values reported everywhere.
pub const STANDARD_KS: [usize; 3] = [1, 5, 10];

/// Unit-norm image and caption embeddings with the caption → image map.
#[derive(Debug, Clone)]
pub struct RetrievalCorpus {
    images: DenseMatrix,
    texts: DenseMatrix,
    caption_to_image: Vec<usize>,
    image_to_captions: Vec<Vec<usize>>,
}

impl RetrievalCorpus {
    pub fn new(
        images: DenseMatrix,
        texts: DenseMatrix,
        caption_to_image: Vec<usize>,
    ) -> Result<Self> {
        if images.cols() != texts.cols() {
            return Err(Error::DimensionMismatch(format!(
                "image dim {} != text dim {}",
                images.cols(),
                texts.cols()
            )));
        }
        if caption_to_image.len() != texts.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} captions but {} caption labels",
                texts.rows(),
                caption_to_image.len()
            )));
        }
        let mut image_to_captions = vec![Vec::new(); images.rows()];
        for (c, &img) in caption_to_image.iter().enumerate() {
            let slot = image_to_captions.get_mut(img).ok_or_else(|| {
                Error::Domain(format!(
                    "caption {c} points at image {img}, but there are {}",
                    images.rows()
                ))
            })?;
            slot.push(c);
        }
        if let Some(i) = image_to_captions.iter().position(Vec::is_empty) {
            return Err(Error::Domain(format!("image {i} has no caption")));
        }
        for (name, m) in [("image", &images), ("text", &texts)] {
            for r in 0..m.rows() {
                let n = norm2(m.row(r));
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::Domain(format!("{name} embedding {r} has norm {n}")));
                }
            }
        }
        Ok(Self {
            images,
            texts,
            caption_to_image,
            image_to_captions,
        })
    }

    pub fn images(&self) -> &DenseMatrix {
        &self.images
    }

    pub fn texts(&self) -> &DenseMatrix {
        &self.texts
    }

    pub fn caption_to_image(&self) -> &[usize] {
        &self.caption_to_image
    }

    pub fn image_to_captions(&self) -> &[Vec<usize>] {
        &self.image_to_captions
    }

    /// One (image, caption) row pair per caption.
    pub fn pairs(&self) -> ModelBatch {
        let image = self.images.select_rows(&self.caption_to_image);
        ModelBatch::raw(image, self.texts.clone()).expect("same width")
    }
}

/// Number of candidates ranked strictly ahead of `target`.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count()
}

fn check_ks(ks: &[usize], max: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::EmptyInput("recall ks"));
    }
    for &k in ks {
        if k == 0 || k > max {
            return Err(Error::BadK { k, max });
        }
    }
    Ok(())
}

/// Text → image: a caption succeeds when its image ranks within the top K.
pub fn recall_at_k_t2i(corpus: &RetrievalCorpus, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_ks(ks, corpus.images.rows())?;
    let mut hits = vec![0usize; ks.len()];
    let mut scores = vec![0.0; corpus.images.rows()];
    for (c, &gt) in corpus.caption_to_image.iter().enumerate() {
        let q = corpus.texts.row(c);
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(q, corpus.images.row(i));
        }
        let rank = rank_of(&scores, gt);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let total = corpus.texts.rows() as f64;
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, 100.0 * h as f64 / total))
        .collect())
}

/// Image → text: an image succeeds when any of its captions ranks within the
/// top K.
pub fn recall_at_k_i2t(corpus: &RetrievalCorpus, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_ks(ks, corpus.texts.rows())?;
    let mut hits = vec![0usize; ks.len()];
    let mut scores = vec![0.0; corpus.texts.rows()];
    for (i, captions) in corpus.image_to_captions.iter().enumerate() {
        let q = corpus.images.row(i);
        for (c, s) in scores.iter_mut().enumerate() {
            *s = dot(q, corpus.texts.row(c));
        }
        let best = captions
            .iter()
            .map(|&c| rank_of(&scores, c))
            .min()
            .expect("nonempty");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if best < k {
                *h += 1;
            }
        }
    }
    let total = corpus.images.rows() as f64;
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, 100.0 * h as f64 / total))
        .collect())
}

/// Mean cosine of matched pairs.
pub fn alignment_score(pairs: &ModelBatch) -> f64 {
    let n = pairs.len();
    if n == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (pairs.image.row(i), pairs.text.row(i));
        s += dot(a, b) / (norm2(a) * norm2(b));
    }
    s / n as f64
}

/// Difference of the image and text centroids, and its norm.
pub fn modality_gap(pairs: &ModelBatch) -> (Vec<f64>, f64) {
    let n = pairs.len();
    let d = pairs.dim();
    let mut gap = vec![0.0; d];
    if n == 0 {
        return (gap, 0.0);
    }
    for i in 0..n {
        for (g, (a, b)) in gap
            .iter_mut()
            .zip(pairs.image.row(i).iter().zip(pairs.text.row(i)))
        {
            *g += a - b;
        }
    }
    gap.iter_mut().for_each(|g| *g /= n as f64);
    let norm = norm2(&gap);
    (gap, norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub t2i: BTreeMap<usize, f64>,
    pub i2t: BTreeMap<usize, f64>,
    /// Mean of the six R@{1,5,10} values.
    pub avg_recall: f64,
    pub alignment: f64,
    pub modality_gap_norm: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "t2i_r1,t2i_r5,t2i_r10,i2t_r1,i2t_r5,i2t_r10,avg,alignment,modality_gap";

    pub fn csv_row(&self) -> String {
        let mut fields: Vec<String> = Vec::new();
        for map in [&self.t2i, &self.i2t] {
            for k in STANDARD_KS {
                fields.push(format!("{:.6}", map[&k]));
            }
        }
        fields.push(format!("{:.6}", self.avg_recall));
        fields.push(format!("{:.6}", self.alignment));
        fields.push(format!("{:.6}", self.modality_gap_norm));
        fields.join(",")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<10}{:>9}{:>9}{:>9}\n",
            "", "R@1", "R@5", "R@10"
        ));
        for (name, map) in [("text→img", &self.t2i), ("img→text", &self.i2t)] {
            s.push_str(&format!("{name:<10}"));
            for k in STANDARD_KS {
                s.push_str(&format!("{:>9.2}", map[&k]));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<18}{:>9.2}\n", "avg recall", self.avg_recall));
        s.push_str(&format!("{:<18}{:>9.4}\n", "alignment", self.alignment));
        s.push_str(&format!(
            "{:<18}{:>9.4}\n",
            "modality gap", self.modality_gap_norm
        ));
        s
    }
}

/// Standard report. K values above the candidate count are clamped to it.
pub fn evaluate(corpus: &RetrievalCorpus) -> Result<EvalReport> {
    let clamp = |max: usize| -> Vec<usize> { STANDARD_KS.iter().map(|&k| k.min(max)).collect() };
    let t2i_raw = recall_at_k_t2i(corpus, &clamp(corpus.images.rows()))?;
    let i2t_raw = recall_at_k_i2t(corpus, &clamp(corpus.texts.rows()))?;
    let relabel = |raw: &BTreeMap<usize, f64>, max: usize| -> BTreeMap<usize, f64> {
        STANDARD_KS.iter().map(|&k| (k, raw[&k.min(max)])).collect()
    };
    let t2i = relabel(&t2i_raw, corpus.images.rows());
    let i2t = relabel(&i2t_raw, corpus.texts.rows());
    let avg_recall = (t2i.values().sum::<f64>() + i2t.values().sum::<f64>()) / 6.0;
    let pairs = corpus.pairs();
    Ok(EvalReport {
        avg_recall,
        alignment: alignment_score(&pairs),
        modality_gap_norm: modality_gap(&pairs).1,
        t2i,
        i2t,
    })
}
