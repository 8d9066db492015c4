//! Cross-modal retrieval evaluation: CSD ranking, Recall@10%, median rank,
//! text-augmented and metadata-conditioned queries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{GaussianEmbedding, ImageArray};
use crate::error::{CoreError, Result};
use crate::fusion::Metadata;
use crate::geodata::{GeoSample, PayloadStore};
use crate::loss::csd;
use crate::train::{eval_audio_embedding, eval_image_embedding, eval_text_embedding, ModelState};

/// Retrieval direction: image queries against an audio gallery or vice versa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    I2A,
    A2I,
}

/// 1-based ranks of the ground truth per query, over a gallery of size `n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankList {
    pub ranks: Vec<usize>,
    pub n: usize,
}

impl RankList {
    pub fn new(ranks: Vec<usize>, n: usize) -> Self {
        assert!(ranks.iter().all(|&r| r >= 1 && r <= n), "ranks must lie in 1..=n");
        Self { ranks, n }
    }
}

/// Rank of the ground-truth gallery item under ascending CSD, ties broken by
/// gallery index.
pub fn rank_gallery(
    query: &GaussianEmbedding,
    gallery: &[GaussianEmbedding],
    truth_index: usize,
) -> usize {
    assert!(!gallery.is_empty(), "gallery must be non-empty");
    assert!(truth_index < gallery.len(), "truth index {truth_index} out of gallery {}", gallery.len());
    let d_truth = csd(query, &gallery[truth_index]);
    let mut rank = 1usize;
    for (j, item) in gallery.iter().enumerate() {
        if j == truth_index {
            continue;
        }
        let d = csd(query, item);
        if d < d_truth || (d == d_truth && j < truth_index) {
            rank += 1;
        }
    }
    rank
}

/// Fraction of queries whose truth ranks within the top `pct` of the gallery
/// (cutoff `ceil(pct * n)`).
pub fn recall_at_pct(ranks: &RankList, pct: f64) -> f64 {
    assert!(pct > 0.0 && pct <= 1.0, "pct must lie in (0, 1]");
    if ranks.ranks.is_empty() {
        return 0.0;
    }
    let cutoff = (pct * ranks.n as f64).ceil() as usize;
    let hits = ranks.ranks.iter().filter(|&&r| r <= cutoff).count();
    hits as f64 / ranks.ranks.len() as f64
}

/// Median of the ranks; an even count averages the middle pair.
pub fn median_rank(ranks: &RankList) -> f64 {
    assert!(!ranks.ranks.is_empty(), "median of an empty rank list");
    let mut sorted = ranks.ranks.clone();
    sorted.sort_unstable();
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    }
}

/// Add a text embedding to a query: independent Gaussians sum, so means add
/// and variances add. Absent text returns the primary unchanged.
pub fn compose_query(
    primary: &GaussianEmbedding,
    text: Option<&GaussianEmbedding>,
) -> GaussianEmbedding {
    let Some(text) = text else { return primary.clone() };
    assert_eq!(primary.dim(), text.dim(), "compose_query dimension mismatch");
    let mu = primary.mu.iter().zip(&text.mu).map(|(&a, &b)| a + b).collect();
    let log_var = primary
        .log_var
        .iter()
        .zip(&text.log_var)
        .map(|(&a, &b)| {
            let (hi, lo) = if a >= b { (a as f64, b as f64) } else { (b as f64, a as f64) };
            (hi + (lo - hi).exp().ln_1p()) as f32
        })
        .collect();
    GaussianEmbedding::new(mu, log_var)
}

/// Evaluation settings mirroring the reporting grid: direction, zoom level,
/// text-augmented queries, metadata conditioning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub direction: Direction,
    pub zoom: u32,
    pub use_text: bool,
    pub use_metadata: bool,
}

/// Retrieval metrics for one settings row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub zoom: u32,
    pub use_text: bool,
    pub use_metadata: bool,
    pub r_at_10pct: f64,
    pub mdr: f64,
    pub n: usize,
}

/// Embed every sample's three modalities with frozen parameters.
///
/// The image branch is fused with the sample's metadata when `use_metadata`
/// is set and with an all-masked metadata record otherwise; eval images are
/// center-cropped, never augmented.
pub fn embed_split(
    state: &ModelState,
    samples: &[GeoSample],
    store: &PayloadStore,
    zoom: u32,
    use_metadata: bool,
) -> Result<Vec<(GaussianEmbedding, GaussianEmbedding, GaussianEmbedding)>> {
    samples
        .par_iter()
        .map(|s| {
            let tile = ImageArray::from_payload(&store.get(&s.image_ref)?)?;
            let meta = if use_metadata { Metadata::from_sample(s) } else { Metadata::all_masked() };
            let img = eval_image_embedding(state, &tile, zoom, &meta)?;
            let aud = eval_audio_embedding(state, &store.get(&s.audio_ref)?.data);
            let txt = eval_text_embedding(state, &s.caption)?;
            Ok((img, aud, txt))
        })
        .collect()
}

/// Run retrieval over a split and report Recall@10% and median rank.
pub fn evaluate(
    state: &ModelState,
    samples: &[GeoSample],
    store: &PayloadStore,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(CoreError::Config("evaluate requires a non-empty split".into()));
    }
    let embedded = embed_split(state, samples, store, settings.zoom, settings.use_metadata)?;
    let n = embedded.len();
    let ranks: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (img, aud, txt) = &embedded[i];
            let text = settings.use_text.then_some(txt);
            match settings.direction {
                Direction::I2A => {
                    let query = compose_query(img, text);
                    let gallery: Vec<GaussianEmbedding> =
                        embedded.iter().map(|(_, a, _)| a.clone()).collect();
                    rank_gallery(&query, &gallery, i)
                }
                Direction::A2I => {
                    let query = compose_query(aud, text);
                    let gallery: Vec<GaussianEmbedding> =
                        embedded.iter().map(|(im, _, _)| im.clone()).collect();
                    rank_gallery(&query, &gallery, i)
                }
            }
        })
        .collect();
    let list = RankList::new(ranks, n);
    Ok(EvalReport {
        direction: settings.direction,
        zoom: settings.zoom,
        use_text: settings.use_text,
        use_metadata: settings.use_metadata,
        r_at_10pct: recall_at_pct(&list, 0.10),
        mdr: median_rank(&list),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn emb(seed: u64, dim: usize) -> GaussianEmbedding {
        let mut rng = crate::rng::stream(seed, "retrieval-emb");
        GaussianEmbedding::new(
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..dim).map(|_| rng.gen_range(-2.0..0.0)).collect(),
        )
    }

    #[test]
    fn singleton_gallery_ranks_first() {
        let q = emb(1, 4);
        assert_eq!(rank_gallery(&q, &[emb(2, 4)], 0), 1);
    }

    #[test]
    fn farthest_truth_ranks_last() {
        let q = GaussianEmbedding::new(vec![0.0; 2], vec![-40.0; 2]);
        let near = GaussianEmbedding::new(vec![0.1, 0.0], vec![-40.0; 2]);
        let mid = GaussianEmbedding::new(vec![1.0, 0.0], vec![-40.0; 2]);
        let far = GaussianEmbedding::new(vec![9.0, 9.0], vec![-40.0; 2]);
        assert_eq!(rank_gallery(&q, &[near, mid, far.clone()], 2), 3);
    }

    #[test]
    fn rank_agrees_with_full_sort_oracle() {
        let mut rng = crate::rng::stream(3, "rank-oracle");
        for trial in 0..50 {
            let dim = 6;
            let q = emb(100 + trial, dim);
            let gallery: Vec<GaussianEmbedding> =
                (0..16).map(|j| emb(1000 + trial * 16 + j, dim)).collect();
            let truth = rng.gen_range(0..16usize);
            // oracle: stable sort of (distance, index)
            let mut order: Vec<usize> = (0..16).collect();
            let dists: Vec<f64> = gallery.iter().map(|g| csd(&q, g)).collect();
            order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
            let oracle = 1 + order.iter().position(|&j| j == truth).unwrap();
            assert_eq!(rank_gallery(&q, &gallery, truth), oracle, "trial {trial}");
        }
    }

    #[test]
    fn recall_cutoff_examples() {
        let all_first = RankList::new(vec![1, 1, 1], 50);
        assert_eq!(recall_at_pct(&all_first, 0.10), 1.0);
        let all_last = RankList::new(vec![200; 5], 200);
        assert_eq!(recall_at_pct(&all_last, 0.10), 0.0);
        // N=20 -> cutoff ceil(2) = 2; ranks [1,3,2,5] -> hits {1,2}
        let mixed = RankList::new(vec![1, 3, 2, 5], 20);
        assert_eq!(recall_at_pct(&mixed, 0.10), 0.5);
    }

    #[test]
    fn recall_monotone_in_pct() {
        let list = RankList::new(vec![1, 4, 7, 12, 19], 20);
        let mut last = 0.0;
        for pct in [0.05, 0.1, 0.2, 0.35, 0.6, 1.0] {
            let r = recall_at_pct(&list, pct);
            assert!(r >= last, "recall must not decrease as pct grows");
            last = r;
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_rank(&RankList::new(vec![1, 1, 1], 5)), 1.0);
        assert_eq!(median_rank(&RankList::new(vec![1, 2, 3, 4], 5)), 2.5);
        assert_eq!(median_rank(&RankList::new(vec![7], 10)), 7.0);
    }

    #[test]
    #[should_panic(expected = "empty rank list")]
    fn median_of_empty_panics() {
        let _ = median_rank(&RankList { ranks: vec![], n: 5 });
    }

    #[test]
    fn compose_query_identity_cases() {
        let p = emb(7, 5);
        assert_eq!(compose_query(&p, None), p);
        // text with mu = 0 and sigma^2 ~ 0 leaves the query unchanged
        let null_text = GaussianEmbedding::new(vec![0.0; 5], vec![-90.0; 5]);
        let composed = compose_query(&p, Some(&null_text));
        assert_eq!(composed.mu, p.mu);
        for (a, b) in composed.log_var.iter().zip(&p.log_var) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn compose_query_adds_means_and_variances() {
        let p = emb(8, 4);
        let t = emb(9, 4);
        let c = compose_query(&p, Some(&t));
        for j in 0..4 {
            let want_mu = p.mu[j] + t.mu[j];
            assert!((c.mu[j] - want_mu).abs() < 1e-6);
            let want_var = (p.log_var[j] as f64).exp() + (t.log_var[j] as f64).exp();
            let got_var = (c.log_var[j] as f64).exp();
            assert!((got_var - want_var).abs() / want_var < 1e-5, "{got_var} vs {want_var}");
        }
    }
}
