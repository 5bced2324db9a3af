//! Clustered synthetic pair data.
//!
//! Each cluster has one center per feature space. Model-space features are
//! the cluster center plus isotropic Gaussian noise, drawn independently for
//! every image and every caption, so a caption shares only its cluster with
//! its image. Graph-space features are the noiseless cluster centers of a
//! single shared graph space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sigrot::numerics::l2_normalize;
use sigrot::training::{PairDataset, PairRecord, Split};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_clusters: usize,
    /// Images per cluster.
    pub pairs_per_cluster: usize,
    pub d_model_img: usize,
    pub d_model_txt: usize,
    pub d_graph: usize,
    pub noise_sigma: f64,
    pub captions_per_image: usize,
    pub seed: u64,
    /// Use the same centers for images and captions in model space. Needs
    /// `d_model_img == d_model_txt`.
    pub shared_centers: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            pairs_per_cluster: 64,
            d_model_img: 32,
            d_model_txt: 24,
            d_graph: 16,
            noise_sigma: 0.35,
            captions_per_image: 3,
            seed: 42,
            shared_centers: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> CliResult<()> {
        let counts = [
            ("n_clusters", self.n_clusters),
            ("pairs_per_cluster", self.pairs_per_cluster),
            ("d_model_img", self.d_model_img),
            ("d_model_txt", self.d_model_txt),
            ("d_graph", self.d_graph),
            ("captions_per_image", self.captions_per_image),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Usage(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CliError::Usage(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.shared_centers && self.d_model_img != self.d_model_txt {
            return Err(CliError::Usage(
                "shared_centers needs d_model_img == d_model_txt".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_centers(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| loop {
            if let Ok(v) = l2_normalize(&gaussian(rng, d)) {
                break v;
            }
        })
        .collect()
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center
        .iter()
        .zip(gaussian(rng, center.len()))
        .map(|(c, z)| c + sigma * z)
        .collect()
}

/// Cluster index of every image, in image order.
pub fn image_clusters(cfg: &SynthConfig) -> Vec<usize> {
    (0..cfg.n_clusters)
        .flat_map(|c| std::iter::repeat_n(c, cfg.pairs_per_cluster))
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> CliResult<PairDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let img_centers = unit_centers(&mut rng, cfg.n_clusters, cfg.d_model_img);
    let txt_centers = if cfg.shared_centers {
        img_centers.clone()
    } else {
        unit_centers(&mut rng, cfg.n_clusters, cfg.d_model_txt)
    };
    let graph_centers = unit_centers(&mut rng, cfg.n_clusters, cfg.d_graph);

    let clusters = image_clusters(cfg);
    let n_images = clusters.len();
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut rng);
    let n_train = (n_images as f64 * 0.70).round() as usize;
    let n_val = (n_images as f64 * 0.15).round() as usize;
    let mut split = vec![Split::Test; n_images];
    for (rank, &img) in order.iter().enumerate() {
        split[img] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut records = Vec::with_capacity(n_images * cfg.captions_per_image);
    for (img, &c) in clusters.iter().enumerate() {
        let image_feature = noisy(&mut rng, &img_centers[c], cfg.noise_sigma);
        for k in 0..cfg.captions_per_image {
            records.push(PairRecord {
                image_id: format!("img{img:05}"),
                caption_id: format!("cap{:06}", img * cfg.captions_per_image + k),
                split: split[img],
                image_feature: image_feature.clone(),
                text_feature: noisy(&mut rng, &txt_centers[c], cfg.noise_sigma),
                graph_image_feature: graph_centers[c].clone(),
                graph_text_feature: graph_centers[c].clone(),
            });
        }
    }
    Ok(PairDataset::new(
        records,
        cfg.d_model_img,
        cfg.d_model_txt,
        cfg.d_graph,
    )?)
}
