//! Embedding corpora: queries, candidate images, category descriptors, and a
//! seeded long-tailed synthetic generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand_distr::Poisson;

use crate::error::{contract, Error, Result};
use crate::nn::RngStream;

/// Tolerance on `‖feature‖₂ = 1`. Features are stored as 32-bit floats on
/// disk, so the bound is set at single-precision resolution.
pub const UNIT_NORM_TOL: f64 = 1e-6;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(ImageId);
id_type!(QueryId);
id_type!(CategoryId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub query_id: QueryId,
    pub feature: Vec<f64>,
    /// `None` marks an irrelevant image.
    pub category: Option<CategoryId>,
}

impl ImageRecord {
    pub fn relevant(&self) -> bool {
        self.category.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: QueryId,
    pub feature: Vec<f64>,
    pub gt_categories: BTreeSet<CategoryId>,
    pub candidate_ids: Vec<ImageId>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDescriptor {
    pub category_id: CategoryId,
    pub description_feature: Vec<f64>,
}

/// A validated corpus. Construct through [`EmbeddingCorpus::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    dim: usize,
    queries: Vec<QueryRecord>,
    images: Vec<ImageRecord>,
    descriptors: Vec<CategoryDescriptor>,
    image_index: BTreeMap<ImageId, usize>,
    query_index: BTreeMap<QueryId, usize>,
}

fn check_feature(what: &str, v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(contract(
            "EmbeddingCorpus",
            format!("{what} has dimension {}, corpus dimension is {dim}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} feature")));
    }
    let n = crate::nn::norm(v);
    if libm::fabs(n - 1.0) > UNIT_NORM_TOL {
        return Err(contract(
            "EmbeddingCorpus",
            format!("{what} is not unit norm (‖v‖ = {n})"),
        ));
    }
    Ok(())
}

impl EmbeddingCorpus {
    pub fn new(
        dim: usize,
        queries: Vec<QueryRecord>,
        images: Vec<ImageRecord>,
        descriptors: Vec<CategoryDescriptor>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(contract("EmbeddingCorpus", "dimension must be positive"));
        }
        let mut image_index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            check_feature(&format!("image {}", img.image_id), &img.feature, dim)?;
            if image_index.insert(img.image_id, i).is_some() {
                return Err(contract(
                    "EmbeddingCorpus",
                    format!("duplicate image id {}", img.image_id),
                ));
            }
        }
        let mut query_index = BTreeMap::new();
        for (i, q) in queries.iter().enumerate() {
            check_feature(&format!("query {}", q.query_id), &q.feature, dim)?;
            if query_index.insert(q.query_id, i).is_some() {
                return Err(contract(
                    "EmbeddingCorpus",
                    format!("duplicate query id {}", q.query_id),
                ));
            }
            if q.gt_categories.is_empty() {
                return Err(contract(
                    "EmbeddingCorpus",
                    format!("query {} has no ground-truth categories", q.query_id),
                ));
            }
            let mut seen = BTreeSet::new();
            for id in &q.candidate_ids {
                let img = image_index
                    .get(id)
                    .map(|&i| &images[i])
                    .ok_or_else(|| {
                        contract(
                            "EmbeddingCorpus",
                            format!("query {} references unknown image {id}", q.query_id),
                        )
                    })?;
                if !seen.insert(*id) {
                    return Err(contract(
                        "EmbeddingCorpus",
                        format!("query {} lists image {id} twice", q.query_id),
                    ));
                }
                if img.query_id != q.query_id {
                    return Err(contract(
                        "EmbeddingCorpus",
                        format!("image {id} belongs to query {}, listed by {}", img.query_id, q.query_id),
                    ));
                }
                if let Some(c) = img.category {
                    if !q.gt_categories.contains(&c) {
                        return Err(contract(
                            "EmbeddingCorpus",
                            format!("image {id} has category {c} outside query {}'s ground truth", q.query_id),
                        ));
                    }
                }
            }
        }
        for img in &images {
            if !query_index.contains_key(&img.query_id) {
                return Err(contract(
                    "EmbeddingCorpus",
                    format!("image {} references unknown query {}", img.image_id, img.query_id),
                ));
            }
        }
        let mut cats = BTreeSet::new();
        for d in &descriptors {
            check_feature(&format!("descriptor {}", d.category_id), &d.description_feature, dim)?;
            if !cats.insert(d.category_id) {
                return Err(contract(
                    "EmbeddingCorpus",
                    format!("duplicate descriptor for category {}", d.category_id),
                ));
            }
        }
        Ok(Self {
            dim,
            queries,
            images,
            descriptors,
            image_index,
            query_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn descriptors(&self) -> &[CategoryDescriptor] {
        &self.descriptors
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn query(&self, id: QueryId) -> Option<&QueryRecord> {
        self.query_index.get(&id).map(|&i| &self.queries[i])
    }

    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    /// Candidate image records of a query, in listed order.
    pub fn candidates<'a>(&'a self, query: &'a QueryRecord) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        query
            .candidate_ids
            .iter()
            .filter_map(move |id| self.image(*id))
    }

    /// Whether `image` counts as relevant for `query`.
    pub fn is_relevant_for(&self, query: QueryId, image: ImageId) -> bool {
        self.image(image)
            .is_some_and(|img| img.query_id == query && img.relevant())
    }
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(crate::error::shape(
            "cosine_similarity",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let na = crate::nn::norm(a);
    let nb = crate::nn::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(contract("cosine_similarity", "zero vector"));
    }
    let c = crate::nn::dot(a, b) / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub queries: usize,
    /// The last `test_queries` queries are tagged [`Split::Test`].
    pub test_queries: usize,
    pub dim: usize,
    /// Mean number of categories per query (Poisson, floored at 2).
    pub mean_categories: f64,
    /// Category `r` (1-based rank) holds `max_category_size / r^s` images.
    pub zipf_exponent: f64,
    pub max_category_size: usize,
    /// Per-coordinate standard deviation of image noise around a prototype.
    pub noise_sigma: f64,
    pub irrelevant_per_query: usize,
    /// Shared category pool size. `None` gives every query fresh categories.
    pub category_pool: Option<usize>,
    /// Pool category `i` is drawn with weight `1/(i+1)^e`, and a query's more
    /// popular categories get the larger sizes. `0` draws uniformly and
    /// assigns sizes at random.
    pub popularity_exponent: f64,
    /// Weight of the query direction mixed into irrelevant images.
    pub background_affinity: f64,
    /// Overrides category count and sizes for every query.
    pub forced_sizes: Option<Vec<usize>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            queries: 70,
            test_queries: 20,
            dim: 64,
            mean_categories: 11.8,
            zipf_exponent: 1.2,
            max_category_size: 16,
            noise_sigma: 0.15,
            irrelevant_per_query: 24,
            category_pool: Some(64),
            popularity_exponent: 1.0,
            background_affinity: 0.25,
            forced_sizes: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.mean_categories >= 2.0) {
            return bad("mean categories per query must be at least 2");
        }
        if !(self.noise_sigma > 0.0) {
            return bad("noise sigma must be positive");
        }
        if self.dim == 0 || self.queries == 0 {
            return bad("dimension and query count must be positive");
        }
        if self.test_queries > self.queries {
            return bad("more test queries than queries");
        }
        if self.max_category_size == 0 || !(self.zipf_exponent >= 0.0) {
            return bad("category sizing must be positive");
        }
        if let Some(0 | 1) = self.category_pool {
            return bad("category pool needs at least two categories");
        }
        if let Some(sizes) = &self.forced_sizes {
            if sizes.is_empty() || sizes.contains(&0) {
                return bad("forced category sizes must be nonempty and positive");
            }
            if self.category_pool.is_some_and(|m| m < sizes.len()) {
                return bad("forced category count exceeds the category pool");
            }
        }
        if !(self.popularity_exponent >= 0.0) {
            return bad("popularity exponent must be non-negative");
        }
        if !(self.background_affinity >= 0.0) {
            return bad("background affinity must be non-negative");
        }
        Ok(())
    }
}

/// Rounds every coordinate to the nearest `f32`, making the vector
/// exactly representable in the on-disk format.
fn snap_to_f32(v: &mut [f64]) {
    for x in v {
        *x = f64::from(*x as f32);
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = crate::nn::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    snap_to_f32(&mut v);
    v
}

fn random_unit(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if crate::nn::norm(&v) > 1e-8 {
            return normalized(v);
        }
    }
}

fn jitter(base: &[f64], sigma: f64, rng: &mut RngStream) -> Vec<f64> {
    normalized(base.iter().map(|b| b + sigma * rng.normal()).collect())
}

/// Zipf-style sizes for ranks `1..=count`.
pub fn zipf_sizes(count: usize, max_size: usize, exponent: f64) -> Vec<usize> {
    (1..=count)
        .map(|r| {
            let s = max_size as f64 / libm::pow(r as f64, exponent);
            (libm::round(s) as usize).max(1)
        })
        .collect()
}

/// Generates a long-tailed corpus: per query a handful of categories whose
/// sizes fall off as a power law, with the query feature pulled toward the
/// largest ones, plus a pool of irrelevant background images.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<EmbeddingCorpus> {
    cfg.validate()?;
    let mut proto_rng = RngStream::new(seed, "corpus.prototypes");
    let mut rng = RngStream::new(seed, "corpus.sampling");
    let d = cfg.dim;

    let mut prototypes: BTreeMap<CategoryId, Vec<f64>> = BTreeMap::new();
    if let Some(m) = cfg.category_pool {
        for c in 0..m {
            prototypes.insert(CategoryId(c as u32), random_unit(d, &mut proto_rng));
        }
    }
    let poisson = Poisson::new(cfg.mean_categories)
        .map_err(|e| Error::Config(format!("category count distribution: {e}")))?;

    let mut queries = Vec::with_capacity(cfg.queries);
    let mut images = Vec::new();
    let mut next_image = 0u32;
    let mut next_fresh = 0u32;
    for qi in 0..cfg.queries {
        let query_id = QueryId(qi as u32);
        let sizes = match &cfg.forced_sizes {
            Some(s) => s.clone(),
            None => {
                let mut c = (rng.sample(&poisson) as usize).max(2);
                if let Some(m) = cfg.category_pool {
                    c = c.min(m);
                }
                zipf_sizes(c, cfg.max_category_size, cfg.zipf_exponent)
            }
        };
        let cats: Vec<CategoryId> = match cfg.category_pool {
            Some(m) => {
                let mut pool: Vec<u32> = (0..m as u32).collect();
                rng.shuffle(&mut pool);
                if cfg.popularity_exponent > 0.0 {
                    // weighted sampling without replacement: keep the largest u^(1/w)
                    let mut keyed: Vec<(f64, u32)> = pool
                        .iter()
                        .map(|&c| {
                            let w = libm::pow(c as f64 + 1.0, -cfg.popularity_exponent);
                            (libm::pow(rng.uniform(), 1.0 / w), c)
                        })
                        .collect();
                    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
                    let mut chosen: Vec<u32> = keyed[..sizes.len()].iter().map(|k| k.1).collect();
                    chosen.sort_unstable();
                    pool = chosen;
                }
                pool[..sizes.len()].iter().map(|&c| CategoryId(c)).collect()
            }
            None => (0..sizes.len())
                .map(|_| {
                    let id = CategoryId(next_fresh);
                    next_fresh += 1;
                    prototypes.insert(id, random_unit(d, &mut proto_rng));
                    id
                })
                .collect(),
        };

        let mut mix = alloc::vec![0.0; d];
        for (c, &size) in cats.iter().zip(&sizes) {
            for (m, p) in mix.iter_mut().zip(&prototypes[c]) {
                *m += size as f64 * p;
            }
        }
        let qfeat = normalized(mix);

        let mut candidate_ids = Vec::new();
        for (c, &size) in cats.iter().zip(&sizes) {
            for _ in 0..size {
                let id = ImageId(next_image);
                next_image += 1;
                images.push(ImageRecord {
                    image_id: id,
                    query_id,
                    feature: jitter(&prototypes[c], cfg.noise_sigma, &mut rng),
                    category: Some(*c),
                });
                candidate_ids.push(id);
            }
        }
        for _ in 0..cfg.irrelevant_per_query {
            let id = ImageId(next_image);
            next_image += 1;
            let u = random_unit(d, &mut rng);
            let feat = u
                .iter()
                .zip(&qfeat)
                .map(|(a, b)| a + cfg.background_affinity * b)
                .collect();
            images.push(ImageRecord {
                image_id: id,
                query_id,
                feature: normalized(feat),
                category: None,
            });
            candidate_ids.push(id);
        }
        let split = if qi + cfg.test_queries >= cfg.queries {
            Split::Test
        } else {
            Split::Train
        };
        queries.push(QueryRecord {
            query_id,
            feature: qfeat,
            gt_categories: cats.into_iter().collect(),
            candidate_ids,
            split,
        });
    }

    let mut desc_rng = RngStream::new(seed, "corpus.descriptors");
    let descriptors = prototypes
        .iter()
        .map(|(id, p)| CategoryDescriptor {
            category_id: *id,
            description_feature: jitter(p, cfg.noise_sigma / 4.0, &mut desc_rng),
        })
        .collect();
    EmbeddingCorpus::new(d, queries, images, descriptors)
}

/// The prototype each category was generated from, re-derived from the seed.
/// Exposed for diagnostics and tests.
pub fn generator_prototypes(cfg: &GeneratorConfig, seed: u64) -> Result<BTreeMap<CategoryId, Vec<f64>>> {
    cfg.validate()?;
    let m = cfg.category_pool.ok_or_else(|| {
        Error::Config("prototypes are only reproducible for a shared category pool".into())
    })?;
    let mut proto_rng = RngStream::new(seed, "corpus.prototypes");
    Ok((0..m)
        .map(|c| (CategoryId(c as u32), random_unit(cfg.dim, &mut proto_rng)))
        .collect())
}
