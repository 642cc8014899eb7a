//! Synthetic datasets with known environment ground truth.
//!
//! Each (e, r) cell draws users and items from its own category blob and
//! scores them with environment `e`'s mechanism, so prediction-mechanism
//! heterogeneity, covariate heterogeneity, and their coupling are all planted
//! and recoverable. A separate missing-not-at-random pass simulates the
//! selection effect where high-feedback pairs are observed more often, with
//! the true per-sample propensities returned for oracle tests.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSchema, FieldSpec, Interaction, Side};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::seed;

/// Prediction mechanism of one environment: a signed, scaled latent
/// interaction plus a preference boost for one item category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub scale: f64,
    pub preferred_category: usize,
    pub preference_shift: f64,
}

/// Covariate blob of one (e, r) cell: multinomials over the user and item
/// category pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub user_cat_probs: Vec<f64>,
    pub item_cat_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub n_e: usize,
    pub n_r: usize,
    pub n_user_categories: usize,
    pub n_item_categories: usize,
    /// One per environment; generated when empty (alternating-sign latent
    /// interactions with one preferred item category each).
    pub mechanisms: Vec<MechanismSpec>,
    /// Indexed by `(e * n_r + r) % blobs.len()`; generated when empty (one
    /// concentrated blob per cell, which couples covariates to both levels).
    pub blobs: Vec<BlobSpec>,
    /// Probability mass a generated blob spreads over the other categories.
    pub blob_leak: f64,
    pub noise_sigma: f64,
    pub samples_per_cell: usize,
    /// When set, ratings are quantized to the integer levels `1..=L`.
    pub rating_levels: Option<u32>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 100,
            n_items: 60,
            latent_dim: 4,
            n_e: 2,
            n_r: 2,
            n_user_categories: 4,
            n_item_categories: 4,
            mechanisms: vec![],
            blobs: vec![],
            blob_leak: 0.1,
            noise_sigma: 0.05,
            samples_per_cell: 500,
            rating_levels: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0
            || self.n_items == 0
            || self.latent_dim == 0
            || self.n_e == 0
            || self.n_r == 0
            || self.samples_per_cell == 0
            || self.n_user_categories == 0
            || self.n_item_categories == 0
        {
            return Err(Error::argument("all synth counts must be >= 1"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::argument("noise_sigma must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.blob_leak) {
            return Err(Error::argument("blob_leak must lie in [0, 1)"));
        }
        if !self.mechanisms.is_empty() && self.mechanisms.len() != self.n_e {
            return Err(Error::argument("mechanisms must have one entry per environment"));
        }
        if let Some(m) = self
            .mechanisms
            .iter()
            .find(|m| m.preferred_category >= self.n_item_categories)
        {
            return Err(Error::argument(format!(
                "preferred category {} outside {} item categories",
                m.preferred_category, self.n_item_categories
            )));
        }
        for b in &self.blobs {
            if b.user_cat_probs.len() != self.n_user_categories
                || b.item_cat_probs.len() != self.n_item_categories
            {
                return Err(Error::argument("blob multinomial lengths must match category counts"));
            }
        }
        if let Some(levels) = self.rating_levels {
            if levels < 2 {
                return Err(Error::argument("rating_levels must be >= 2"));
            }
        }
        Ok(())
    }

    /// Mechanisms used when none are configured: environment `e` scores
    /// `(-1)^e * <p_u, q_v>` and prefers the item category of its first
    /// cell's blob.
    fn effective_mechanisms(&self) -> Vec<MechanismSpec> {
        if !self.mechanisms.is_empty() {
            return self.mechanisms.clone();
        }
        (0..self.n_e)
            .map(|e| MechanismSpec {
                scale: if e % 2 == 0 { 1.0 } else { -1.0 },
                preferred_category: (e * self.n_r) % self.n_item_categories,
                preference_shift: 0.5,
            })
            .collect()
    }

    /// Blobs used when none are configured: cell (e, r) concentrates on user
    /// category `(e * n_r + r) % n_user_categories` and the matching item
    /// category, leaking `blob_leak` mass to the rest.
    fn effective_blobs(&self) -> Vec<BlobSpec> {
        if !self.blobs.is_empty() {
            return self.blobs.clone();
        }
        let concentrated = |n: usize, on: usize, leak: f64| -> Vec<f64> {
            if n == 1 {
                return vec![1.0];
            }
            (0..n)
                .map(|c| if c == on { 1.0 - leak } else { leak / (n - 1) as f64 })
                .collect()
        };
        (0..self.n_e * self.n_r)
            .map(|cell| BlobSpec {
                user_cat_probs: concentrated(
                    self.n_user_categories,
                    cell % self.n_user_categories,
                    self.blob_leak,
                ),
                item_cat_probs: concentrated(
                    self.n_item_categories,
                    cell % self.n_item_categories,
                    self.blob_leak,
                ),
            })
            .collect()
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::new(vec![
            FieldSpec {
                name: "user_group".into(),
                side: Side::User,
                categories: (0..self.n_user_categories).map(|c| format!("ug{c}")).collect(),
                ids: false,
            },
            FieldSpec {
                name: "item_group".into(),
                side: Side::Item,
                categories: (0..self.n_item_categories).map(|c| format!("ig{c}")).collect(),
                ids: false,
            },
        ])
    }
}

/// Drawn latent state plus the mechanisms: scores can be queried without
/// noise for oracle tests.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: SynthConfig,
    pub mechanisms: Vec<MechanismSpec>,
    pub blobs: Vec<BlobSpec>,
    user_latents: Vec<Vec<f64>>,
    item_latents: Vec<Vec<f64>>,
    user_cats: Vec<usize>,
    item_cats: Vec<usize>,
}

impl Generator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, "synth.latents");
        let normal = Normal::new(0.0, 1.0 / (config.latent_dim as f64).sqrt())
            .expect("valid normal");
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| normal.sample(rng)).collect())
                .collect()
        };
        let user_latents = draw(&mut rng, config.n_users, config.latent_dim);
        let item_latents = draw(&mut rng, config.n_items, config.latent_dim);
        let user_cats = (0..config.n_users).map(|u| u % config.n_user_categories).collect();
        let item_cats = (0..config.n_items).map(|v| v % config.n_item_categories).collect();
        let mechanisms = config.effective_mechanisms();
        let blobs = config.effective_blobs();
        Ok(Generator {
            mechanisms,
            blobs,
            user_latents,
            item_latents,
            user_cats,
            item_cats,
            config,
        })
    }

    /// Noise-free score of environment `e`'s mechanism on a pair.
    pub fn expected_score(&self, e: usize, user: usize, item: usize) -> f64 {
        let m = &self.mechanisms[e];
        let interaction = dot(&self.user_latents[user], &self.item_latents[item]);
        let shift = if self.item_cats[item] == m.preferred_category {
            m.preference_shift
        } else {
            0.0
        };
        m.scale * interaction + shift
    }

    pub fn latent_interaction(&self, user: usize, item: usize) -> f64 {
        dot(&self.user_latents[user], &self.item_latents[item])
    }

    /// Generate the full dataset with ground-truth (e, r) labels attached.
    pub fn generate<S: Scalar>(&self) -> Result<Dataset<S>> {
        let cfg = &self.config;
        let mut rng = seed::rng(cfg.seed, "synth.samples");
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid normal");

        // per-category id pools
        let user_pool = category_pools(&self.user_cats, cfg.n_user_categories);
        let item_pool = category_pools(&self.item_cats, cfg.n_item_categories);

        let mut raw = Vec::with_capacity(cfg.n_e * cfg.n_r * cfg.samples_per_cell);
        let mut gt = Vec::with_capacity(raw.capacity());
        for e in 0..cfg.n_e {
            for r in 0..cfg.n_r {
                let blob = &self.blobs[(e * cfg.n_r + r) % self.blobs.len()];
                for _ in 0..cfg.samples_per_cell {
                    let uc = sample_multinomial(&blob.user_cat_probs, &mut rng);
                    let vc = sample_multinomial(&blob.item_cat_probs, &mut rng);
                    let user = user_pool[uc][rng.gen_range(0..user_pool[uc].len())];
                    let item = item_pool[vc][rng.gen_range(0..item_pool[vc].len())];
                    let mut y = self.expected_score(e, user, item);
                    if cfg.noise_sigma > 0.0 {
                        y += noise.sample(&mut rng);
                    }
                    raw.push((user, item, y));
                    gt.push((e, r));
                }
            }
        }

        if let Some(levels) = cfg.rating_levels {
            quantize_ratings(&mut raw, levels);
        }

        let interactions = raw
            .iter()
            .map(|&(u, v, y)| Interaction::new(u, v, S::from_f64(y)))
            .collect();
        let ds = Dataset::from_parts(
            self.config.schema(),
            interactions,
            (0..cfg.n_users).map(|u| format!("u{u}")).collect(),
            (0..cfg.n_items).map(|v| format!("i{v}")).collect(),
            self.user_cats.iter().map(|&c| vec![c]).collect(),
            self.item_cats.iter().map(|&c| vec![c]).collect(),
        )?;
        Ok(ds.with_ground_truth(gt))
    }
}

fn category_pools(cats: &[usize], n_cats: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); n_cats];
    for (id, &c) in cats.iter().enumerate() {
        pools[c].push(id);
    }
    // round-robin assignment guarantees nonempty pools when ids >= cats,
    // which validate() ensures indirectly only when counts are sane
    pools
}

fn sample_multinomial(probs: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut target = rng.gen_range(0.0..total);
    for (i, &p) in probs.iter().enumerate() {
        if target < p {
            return i;
        }
        target -= p;
    }
    probs.len() - 1
}

fn quantize_ratings(raw: &mut [(usize, usize, f64)], levels: u32) {
    let lo = raw.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let hi = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for entry in raw.iter_mut() {
        let scaled = 1.0 + (levels - 1) as f64 * (entry.2 - lo) / span;
        entry.2 = scaled.round().clamp(1.0, levels as f64);
    }
}

/// Generate a dataset with ground truth from a config.
pub fn gen_heterogeneous<S: Scalar>(config: &SynthConfig) -> Result<Dataset<S>> {
    Generator::new(config.clone())?.generate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnarConfig {
    pub base_observe_rate: f64,
    /// Propensity multiplier for the highest-feedback samples: a sample at
    /// the top of the rating range is observed `bias_strength` times as often
    /// as one at the bottom.
    pub bias_strength: f64,
    pub uniform_sample_size: usize,
}

impl Default for MnarConfig {
    fn default() -> Self {
        MnarConfig { base_observe_rate: 0.1, bias_strength: 4.0, uniform_sample_size: 1000 }
    }
}

impl MnarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.base_observe_rate) || self.base_observe_rate == 0.0 {
            return Err(Error::argument("base_observe_rate must lie in (0, 1)"));
        }
        if self.bias_strength <= 0.0 {
            return Err(Error::argument("bias_strength must be > 0"));
        }
        if self.uniform_sample_size == 0 {
            return Err(Error::argument("uniform_sample_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MnarOutcome<S: Scalar = f64> {
    pub observed: Dataset<S>,
    pub uniform: Dataset<S>,
    /// True observation propensity of every sample of the full dataset.
    pub propensities: Vec<f64>,
    /// Observation flag per full-dataset sample.
    pub flags: Vec<bool>,
    pub observed_indices: Vec<usize>,
    pub uniform_indices: Vec<usize>,
}

/// Simulate the biased observation process: sample `i` is observed
/// independently with probability
/// `clip(base_observe_rate * bias_strength^{y_norm}, 0, 1)` where `y_norm`
/// rescales the rating to `[0, 1]`. The uniform dataset is drawn without
/// replacement, simulating a random logging policy.
pub fn gen_mnar<S: Scalar>(
    full: &Dataset<S>,
    config: &MnarConfig,
    seed_value: u64,
) -> Result<MnarOutcome<S>> {
    config.validate()?;
    if full.is_empty() {
        return Err(Error::argument("full dataset must be nonempty"));
    }
    if config.uniform_sample_size > full.len() {
        return Err(Error::argument(format!(
            "uniform_sample_size {} exceeds dataset size {}",
            config.uniform_sample_size,
            full.len()
        )));
    }
    let ys: Vec<f64> = full.ratings().map(|y| y.to_f64()).collect();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let propensities: Vec<f64> = ys
        .iter()
        .map(|&y| {
            let y_norm = (y - lo) / span;
            (config.base_observe_rate * config.bias_strength.powf(y_norm)).clamp(0.0, 1.0)
        })
        .collect();

    let mut rng = seed::rng(seed_value, "mnar");
    let flags: Vec<bool> = propensities.iter().map(|&p| rng.gen::<f64>() < p).collect();
    let observed_indices: Vec<usize> =
        flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut rng);
    let mut uniform_indices: Vec<usize> = order[..config.uniform_sample_size].to_vec();
    uniform_indices.sort_unstable();

    Ok(MnarOutcome {
        observed: full.subset(&observed_indices),
        uniform: full.subset(&uniform_indices),
        propensities,
        flags,
        observed_indices,
        uniform_indices,
    })
}

/// Ground-truth sidecar file: per-sample environment labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub e_labels: Vec<usize>,
    pub r_labels: Vec<usize>,
}

impl GroundTruthFile {
    pub fn from_dataset<S: Scalar>(dataset: &Dataset<S>) -> Option<Self> {
        dataset.ground_truth_env().map(|gt| GroundTruthFile {
            e_labels: gt.iter().map(|&(e, _)| e).collect(),
            r_labels: gt.iter().map(|&(_, r)| r).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
