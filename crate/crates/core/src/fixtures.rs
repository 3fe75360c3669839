//! Offline stand-ins for the encoder and the LLM.
//!
//! * [`HashEmbedder`] maps text to a unit vector by summing pseudo-random
//!   token vectors, so identical texts embed identically and texts sharing
//!   words are correlated.
//! * [`LookupEmbedder`] serves vectors from a container whose row names are
//!   the texts, for embeddings computed elsewhere.
//! * [`make_synthetic`] builds labeled datasets with planted outlier prompts.
//! * The `pets` helpers describe a five-class toy run whose LLM replies ship
//!   in `fixtures/pets_llm.json`.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{write_labels, ClassifierError};
use crate::concepts::llm::{request_digest, FixtureEntry};
use crate::concepts::prompts::{format_reply, render_contrastive_prompt_n};
use crate::concepts::{ConceptEmbedder, ConceptError};
use crate::embedding::{
    dot, manifest_path, normalize_in_place, save_container, EmbeddingContainer, EmbeddingError,
    Role,
};
use crate::neighborhoods::build_neighborhoods;
use crate::rng::{self, StreamRng};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {k} anchors in {dim} dimensions with pairwise cosine below {cap}")]
    InfeasibleCap { k: usize, dim: usize, cap: f64 },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Labels(#[from] ClassifierError),
}

fn gaussian_unit(dim: usize, rng: &mut StreamRng) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        if normalize_in_place(&mut v) {
            return v;
        }
    }
}

/// `a + scale * g` with `g ~ N(0, I/dim)`, renormalized.
fn perturb(a: &[f32], scale: f64, rng: &mut StreamRng) -> Vec<f32> {
    let sd = scale / (a.len() as f64).sqrt();
    loop {
        let mut v: Vec<f32> = a
            .iter()
            .map(|&x| (x as f64 + sd * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        if normalize_in_place(&mut v) {
            return v;
        }
    }
}

/// Weight of the whole-text vector relative to one token vector.
pub const TEXT_COMPONENT: f64 = 0.5;

/// Bag-of-tokens embedder with stable, seed-dependent token vectors.
///
/// Tokens are lowercase alphanumeric runs. Each token maps to a Gaussian
/// vector drawn from a stream keyed by the SHA-256 of the token. A smaller
/// vector keyed by the whole normalized text is added so that distinct texts
/// built from the same words stay linearly independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let h = Sha256::digest(token.as_bytes());
        let key = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
        let mut r = rng::stream(self.seed, &[key]);
        (0..self.dim).map(|_| r.sample(StandardNormal)).collect()
    }
}

impl ConceptEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, ConceptError> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut acc = self
            .token_vector(&format!("\u{0}{}", tokens.join(" ")))
            .into_iter()
            .map(|v| TEXT_COMPONENT * v)
            .collect::<Vec<_>>();
        for tok in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += v;
            }
        }
        let mut out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        if tokens.is_empty() || self.dim == 0 || !normalize_in_place(&mut out) {
            return Err(ConceptError::Embed {
                text: text.to_string(),
                message: "no tokens to embed".into(),
            });
        }
        Ok(out)
    }
}

/// Serves precomputed embeddings keyed by row name.
#[derive(Debug, Clone)]
pub struct LookupEmbedder {
    container: EmbeddingContainer,
}

impl LookupEmbedder {
    pub fn new(container: EmbeddingContainer) -> Result<Self, EmbeddingError> {
        if !container.is_normalized() {
            return Err(EmbeddingError::Unnormalized(container.role().to_string()));
        }
        Ok(Self { container })
    }
}

impl ConceptEmbedder for LookupEmbedder {
    fn dim(&self) -> usize {
        self.container.dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, ConceptError> {
        self.container
            .index_of(text)
            .map(|i| self.container.row(i).to_vec())
            .ok_or_else(|| ConceptError::Embed {
                text: text.to_string(),
                message: "not present in the embedding container".into(),
            })
    }
}

/// Parameters of a labeled synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub k: usize,
    pub m_per_class: usize,
    pub n_images: usize,
    pub dim: usize,
    /// Weight of the class anchor in each image before renormalizing.
    pub margin: f64,
    /// Norm of the Gaussian noise added to image anchors.
    pub noise_sigma: f64,
    /// Norm of the Gaussian perturbation of clean prompts.
    pub prompt_sigma: f64,
    /// Fraction of each class's prompts replaced by random unit vectors.
    pub outlier_rate: f64,
    /// Pairwise cosine between class anchors stays below this.
    pub anchor_cos_cap: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            k: 8,
            m_per_class: 20,
            n_images: 400,
            dim: 64,
            margin: 1.0,
            noise_sigma: 4.0,
            prompt_sigma: 0.5,
            outlier_rate: 0.3,
            anchor_cos_cap: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let bad = |m: &str| Err(FixtureError::InvalidSpec(m.into()));
        if self.k < 2 || self.m_per_class == 0 || self.dim == 0 {
            return bad("need k >= 2, m_per_class >= 1, dim >= 1");
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return bad("margin must be non-negative");
        }
        if !(0.0..0.5).contains(&self.outlier_rate) {
            return bad("outlier_rate must lie in [0, 0.5)");
        }
        if !(self.noise_sigma >= 0.0 && self.prompt_sigma >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.anchor_cos_cap <= -1.0 / (self.k as f64 - 1.0) || self.anchor_cos_cap > 1.0 {
            return Err(FixtureError::InfeasibleCap {
                k: self.k,
                dim: self.dim,
                cap: self.anchor_cos_cap,
            });
        }
        Ok(())
    }

    /// Planted outlier prompts per class.
    pub fn outliers_per_class(&self) -> usize {
        (self.outlier_rate * self.m_per_class as f64).round() as usize
    }
}

/// A generated dataset with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub classes: EmbeddingContainer,
    pub prompts: Vec<EmbeddingContainer>,
    pub images: EmbeddingContainer,
    pub labels: Vec<usize>,
    /// Per class, `true` for planted outlier prompts.
    pub outlier_masks: Vec<Vec<bool>>,
}

impl SyntheticDataset {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.names().to_vec()
    }

    /// Writes `classes`, `images`, `prompts/<class>` containers and `labels.json`.
    pub fn write(&self, dir: &Path) -> Result<(), FixtureError> {
        save_container(&self.classes, manifest_path(dir, "classes"))?;
        save_container(&self.images, manifest_path(dir, "images"))?;
        for (name, p) in self.classes.names().iter().zip(&self.prompts) {
            save_container(p, manifest_path(&dir.join("prompts"), name))?;
        }
        write_labels(dir.join("labels.json"), &self.images, &self.labels)?;
        Ok(())
    }
}

const ANCHOR_ATTEMPTS: usize = 10_000;

/// Generates anchors, prompts (with planted outliers) and images.
pub fn make_synthetic(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset, FixtureError> {
    spec.validate()?;
    let mut anchor_rng = rng::stream(spec.seed, &[0]);
    let mut anchors: Vec<Vec<f32>> = Vec::with_capacity(spec.k);
    while anchors.len() < spec.k {
        let placed = (0..ANCHOR_ATTEMPTS).find_map(|_| {
            let a = gaussian_unit(spec.dim, &mut anchor_rng);
            anchors
                .iter()
                .all(|b| dot(&a, b) < spec.anchor_cos_cap)
                .then_some(a)
        });
        match placed {
            Some(a) => anchors.push(a),
            None => {
                return Err(FixtureError::InfeasibleCap {
                    k: spec.k,
                    dim: spec.dim,
                    cap: spec.anchor_cos_cap,
                })
            }
        }
    }
    let class_names: Vec<String> = (0..spec.k).map(|c| format!("class_{c:02}")).collect();

    let n_out = spec.outliers_per_class();
    let mut prompts = Vec::with_capacity(spec.k);
    let mut outlier_masks = Vec::with_capacity(spec.k);
    for (c, anchor) in anchors.iter().enumerate() {
        let mut r = rng::stream(spec.seed, &[1, c as u64]);
        let mut mask = vec![false; spec.m_per_class];
        for i in index::sample(&mut r, spec.m_per_class, n_out) {
            mask[i] = true;
        }
        let rows: Vec<Vec<f32>> = mask
            .iter()
            .map(|&out| {
                if out {
                    gaussian_unit(spec.dim, &mut r)
                } else {
                    perturb(anchor, spec.prompt_sigma, &mut r)
                }
            })
            .collect();
        let names = (0..spec.m_per_class)
            .map(|j| format!("{}/prompt_{j:03}", class_names[c]))
            .collect();
        prompts.push(EmbeddingContainer::from_rows(
            Role::Prompt,
            names,
            rows,
            true,
        )?);
        outlier_masks.push(mask);
    }

    let labels: Vec<usize> = (0..spec.n_images).map(|i| i % spec.k).collect();
    let rows: Vec<Vec<f32>> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut r = rng::stream(spec.seed, &[2, i as u64]);
            let scaled: Vec<f32> = anchors[y]
                .iter()
                .map(|&x| (x as f64 * spec.margin) as f32)
                .collect();
            if spec.margin == 0.0 {
                gaussian_unit(spec.dim, &mut r)
            } else {
                perturb(&scaled, spec.noise_sigma, &mut r)
            }
        })
        .collect();
    let image_names = (0..spec.n_images).map(|i| format!("img_{i:05}")).collect();

    Ok(SyntheticDataset {
        classes: EmbeddingContainer::from_rows(Role::Class, class_names, anchors, true)?,
        prompts,
        images: EmbeddingContainer::from_rows(Role::Image, image_names, rows, true)?,
        labels,
        outlier_masks,
    })
}

/// Classes of the packaged toy run.
pub const PETS_CLASSES: [&str; 5] = ["abyssinian", "beagle", "bengal", "pug", "sphynx"];
pub const PETS_SEED: u64 = 7;
pub const PETS_DIM: usize = 64;
pub const PETS_MODEL: &str = "gpt-4.1";
/// Recorded replies for the toy run, keyed for `top_h = 10`, `per_call = 10`.
pub const PETS_LLM_FIXTURES: &str = include_str!("../fixtures/pets_llm.json");

const PETS_CONCEPTS: [[&str; 14]; 5] = [
    [
        "ticked ruddy coat",
        "large alert ears",
        "almond shaped green eyes",
        "slender muscular body",
        "dark tail tip",
        "pale belly fur",
        "pencil lines on forehead",
        "wedge shaped head",
        "long graceful legs",
        "warm cinnamon tones",
        "dark eyeliner marks",
        "lithe arched back",
        "golden amber eyes",
        "short fine fur",
    ],
    [
        "droopy long ears",
        "tricolor coat",
        "white tipped tail",
        "broad black saddle",
        "gentle brown eyes",
        "square muzzle",
        "sturdy compact frame",
        "nose to the ground",
        "tan cheek patches",
        "short dense hair",
        "white chest blaze",
        "upright wagging tail",
        "soft pleading gaze",
        "medium hound build",
    ],
    [
        "rosette spotted pelt",
        "glittering golden sheen",
        "leopard like markings",
        "thick low set tail",
        "marbled orange pattern",
        "muscular athletic build",
        "wild jungle look",
        "black ringed tail",
        "green oval eyes",
        "small rounded ears",
        "pale spotted belly",
        "strong hind legs",
        "sleek glossy coat",
        "broad whisker pads",
    ],
    [
        "deep facial wrinkles",
        "flat pushed in face",
        "curled tight tail",
        "black velvet mask",
        "bulging round eyes",
        "fawn smooth coat",
        "square stocky body",
        "small folded ears",
        "wide open mouth",
        "thick short neck",
        "underbite jaw",
        "rolls on forehead",
        "compact sturdy legs",
        "snorting wide nostrils",
    ],
    [
        "hairless wrinkled skin",
        "huge bat like ears",
        "lemon shaped eyes",
        "pink peach skin tone",
        "prominent cheekbones",
        "pot bellied torso",
        "whip thin tail",
        "visible skin folds",
        "no whiskers",
        "suede textured body",
        "long webbed toes",
        "spotted pigment patches",
        "angular wedge skull",
        "bare muscular shoulders",
    ],
];

pub fn pets_embedder() -> HashEmbedder {
    HashEmbedder::new(PETS_DIM, PETS_SEED)
}

/// Class-name embeddings of the toy run (bare labels).
pub fn pets_classes() -> EmbeddingContainer {
    let e = pets_embedder();
    let rows = PETS_CLASSES
        .iter()
        .map(|c| e.embed(c).expect("non-empty class name"))
        .collect();
    EmbeddingContainer::from_rows(
        Role::Class,
        PETS_CLASSES.iter().map(|c| c.to_string()).collect(),
        rows,
        true,
    )
    .expect("valid rows")
}

/// `per_class` images per toy class: class vector plus one concept vector
/// plus noise.
pub fn pets_images(per_class: usize, seed: u64) -> (EmbeddingContainer, Vec<usize>) {
    let e = pets_embedder();
    let mut names = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, class) in PETS_CLASSES.iter().enumerate() {
        let base = e.embed(class).expect("non-empty");
        for j in 0..per_class {
            let mut r = rng::stream(seed, &[c as u64, j as u64]);
            let concept = e
                .embed(PETS_CONCEPTS[c][j % PETS_CONCEPTS[c].len()])
                .expect("non-empty");
            let mixed: Vec<f32> = base
                .iter()
                .zip(&concept)
                .map(|(a, b)| a + 0.7 * b)
                .collect();
            names.push(format!("{class}_{j:03}"));
            rows.push(perturb(&mixed, 0.8, &mut r));
            labels.push(c);
        }
    }
    let images = EmbeddingContainer::from_rows(Role::Image, names, rows, true).expect("valid rows");
    (images, labels)
}

/// The four replies recorded for one toy class: six concepts, an
/// unparseable refusal, five new concepts plus a repeat, and the rest.
pub fn pets_replies(class_index: usize) -> Vec<String> {
    let c = &PETS_CONCEPTS[class_index];
    let mut third = vec![c[2]];
    third.extend_from_slice(&c[6..11]);
    vec![
        format_reply(&c[..6]),
        "I'm sorry, I can only describe one class at a time.".to_string(),
        format_reply(&third),
        format_reply(&c[11..]),
    ]
}

/// Rebuilds the packaged fixture entries for the given request settings.
pub fn pets_llm_entries(top_h: usize, per_call: usize, model: &str) -> Vec<FixtureEntry> {
    let table = build_neighborhoods(&pets_classes(), top_h).expect("five classes");
    let mut out = Vec::new();
    for (i, class) in PETS_CLASSES.iter().enumerate() {
        let prompt = render_contrastive_prompt_n(class, &table.neighbor_names(i), per_call)
            .expect("valid class");
        let digest = request_digest(&prompt.system, &prompt.user, model);
        out.extend(pets_replies(i).into_iter().map(|response| FixtureEntry {
            digest: digest.clone(),
            response,
        }));
    }
    out
}

/// Parsed [`PETS_LLM_FIXTURES`].
pub fn packaged_pets_fixtures() -> Vec<FixtureEntry> {
    serde_json::from_str(PETS_LLM_FIXTURES).expect("packaged fixtures parse")
}
