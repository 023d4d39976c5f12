//! Synthetic cross-domain benchmark and N-way K-shot episode sampler.
//!
//! Every image is a grid of `M` tokens: `n_disc` carry the class prototype,
//! `n_dom` carry the domain vector shared by all images of a domain, and the
//! rest are noise. Positions are shuffled per image and the role of every
//! token is kept alongside the grid.
//!
//! The source and target domains draw their classes from one pool of
//! mutually separated prototypes. Target prototypes are the pool vectors
//! rotated by a fixed rotation that turns every vector by exactly `theta`;
//! both domains share the domain vector. Class text embeddings are a fixed
//! linear map of the unrotated prototype plus a prompt component along the
//! domain vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::ClassEmbeddings;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAX_REJECTIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub d_in: usize,
    pub tokens: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub n_disc: usize,
    pub n_dom: usize,
    pub mu_disc: f64,
    pub mu_dom: f64,
    /// Noise scale: every token gets isotropic Gaussian noise with expected
    /// norm close to `sigma` (per-coordinate std `sigma / sqrt(d_in)`).
    pub sigma: f64,
    /// Noise scale in the target domain.
    pub target_sigma: f64,
    /// Rotation angle between source and target frames, radians.
    pub theta: f64,
    /// Largest allowed |cos| between two class prototypes.
    pub max_proto_cos: f64,
    /// Weight of the source domain vector in the class text embeddings.
    pub prompt_weight: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            d_in: 64,
            tokens: 49,
            source_classes: 200,
            target_classes: 10,
            n_disc: 6,
            n_dom: 8,
            mu_disc: 2.0,
            mu_dom: 2.0,
            sigma: 0.5,
            target_sigma: 2.0,
            theta: std::f64::consts::FRAC_PI_3,
            max_proto_cos: 0.3,
            prompt_weight: 1.33,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_in < 2 || self.d_in % 2 != 0 {
            return bad(format!("generator.d_in must be even and >= 2, got {}", self.d_in));
        }
        if self.n_disc == 0 || self.n_dom == 0 {
            return bad("generator.n_disc and generator.n_dom must be >= 1".into());
        }
        if self.n_disc + self.n_dom > self.tokens {
            return bad(format!(
                "generator.n_disc + generator.n_dom = {} exceeds generator.tokens = {}",
                self.n_disc + self.n_dom,
                self.tokens
            ));
        }
        if self.source_classes < 2 || self.target_classes < 2 {
            return bad("generator.source_classes and generator.target_classes must be >= 2".into());
        }
        for (name, v) in [
            ("mu_disc", self.mu_disc),
            ("mu_dom", self.mu_dom),
            ("sigma", self.sigma),
            ("target_sigma", self.target_sigma),
            ("prompt_weight", self.prompt_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("generator.{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.theta.is_finite() {
            return bad("generator.theta must be finite".into());
        }
        if !(self.max_proto_cos > 0.0 && self.max_proto_cos <= 1.0) {
            return bad(format!("generator.max_proto_cos must be in (0, 1], got {}", self.max_proto_cos));
        }
        Ok(())
    }

    pub fn n_noise(&self) -> usize {
        self.tokens - self.n_disc - self.n_dom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Role {
    Noise = 0,
    Discriminative = 1,
    Domain = 2,
}

impl Role {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Noise),
            1 => Some(Self::Discriminative),
            2 => Some(Self::Domain),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_disc: usize,
    pub n_dom: usize,
    pub n_noise: usize,
}

impl Layout {
    pub fn tokens(&self) -> usize {
        self.n_disc + self.n_dom + self.n_noise
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainKind {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    /// Unit domain vector, `d_in` long.
    pub domain: Vec<f64>,
    /// Unit class prototypes, `[C × d_in]`.
    pub prototypes: Tensor,
    /// Row of each local class in the shared [`ClassEmbeddings`] table.
    pub class_ids: Vec<usize>,
    pub theta: f64,
    pub layout: Layout,
    pub mu_disc: f64,
    pub mu_dom: f64,
    pub sigma: f64,
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn d_in(&self) -> usize {
        self.domain.len()
    }

    pub fn tokens(&self) -> usize {
        self.layout.tokens()
    }
}

/// Source and target domains plus the class text table they share.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub classes: ClassEmbeddings,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rotation turning every vector by exactly `theta`: a random orthonormal
/// basis in which the map is block-diagonal with 2×2 rotations.
fn uniform_angle_rotation(rng: &mut ChaCha8Rng, d: usize, theta: f64) -> Tensor {
    // Gram-Schmidt on Gaussian columns gives a random orthonormal basis.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    // R = Σ_pairs (cos θ)(u uᵀ + w wᵀ) + (sin θ)(w uᵀ − u wᵀ)
    let (c, s) = (theta.cos(), theta.sin());
    let mut r = vec![0.0; d * d];
    for p in 0..d / 2 {
        let (u, w) = (&basis[2 * p], &basis[2 * p + 1]);
        for i in 0..d {
            for j in 0..d {
                r[i * d + j] += c * (u[i] * u[j] + w[i] * w[j]) + s * (w[i] * u[j] - u[i] * w[j]);
            }
        }
    }
    Tensor::new(vec![d, d], r).expect("square")
}

fn rotate(r: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| dot(r.row(i), v)).collect()
}

/// Builds both domains and the class table deterministically from `seed`.
pub fn make_benchmark(seed: u64, params: &GeneratorParams, text_dim: usize) -> Result<Benchmark> {
    params.validate()?;
    if text_dim == 0 {
        return Err(Error::Config("text_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.d_in;
    let total = params.source_classes + params.target_classes;
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut tries = 0;
    while protos.len() < total {
        tries += 1;
        if tries > MAX_REJECTIONS {
            return Err(Error::Generation(format!(
                "could not place {total} prototypes with |cos| <= {} in {d} dims; \
                 use fewer classes, a larger d_in or a looser max_proto_cos",
                params.max_proto_cos
            )));
        }
        let v = unit_gaussian(&mut rng, d);
        if protos.iter().all(|p| dot(p, &v).abs() <= params.max_proto_cos) {
            protos.push(v);
        }
    }
    let d_src = unit_gaussian(&mut rng, d);
    let rot = uniform_angle_rotation(&mut rng, d, params.theta);

    let g: Vec<f64> = (0..text_dim * d)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) / (d as f64).sqrt())
        .collect();
    let mut text = Vec::with_capacity(total * text_dim);
    for p in &protos {
        let base: Vec<f64> = p.iter().zip(&d_src).map(|(a, b)| a + params.prompt_weight * b).collect();
        for k in 0..text_dim {
            text.push(dot(&g[k * d..(k + 1) * d], &base));
        }
    }
    let names = (0..total)
        .map(|i| {
            if i < params.source_classes {
                format!("source_{i}")
            } else {
                format!("target_{}", i - params.source_classes)
            }
        })
        .collect();
    let classes = ClassEmbeddings::new(Tensor::new(vec![total, text_dim], text)?, names)?;

    let layout = Layout { n_disc: params.n_disc, n_dom: params.n_dom, n_noise: params.n_noise() };
    let flat = |rows: &[Vec<f64>]| Tensor::new(vec![rows.len(), d], rows.concat()).expect("rows");
    let source = DomainSpec {
        kind: DomainKind::Source,
        domain: d_src.clone(),
        prototypes: flat(&protos[..params.source_classes]),
        class_ids: (0..params.source_classes).collect(),
        theta: 0.0,
        layout,
        mu_disc: params.mu_disc,
        mu_dom: params.mu_dom,
        sigma: params.sigma,
    };
    let target_protos: Vec<Vec<f64>> = protos[params.source_classes..].iter().map(|p| rotate(&rot, p)).collect();
    let target = DomainSpec {
        kind: DomainKind::Target,
        domain: d_src.clone(),
        prototypes: flat(&target_protos),
        class_ids: (params.source_classes..total).collect(),
        theta: params.theta,
        layout,
        mu_disc: params.mu_disc,
        mu_dom: params.mu_dom,
        sigma: params.target_sigma,
    };
    Ok(Benchmark { source, target, classes })
}

/// One domain of [`make_benchmark`].
pub fn make_domain(seed: u64, params: &GeneratorParams, kind: DomainKind) -> Result<DomainSpec> {
    let b = make_benchmark(seed, params, 1)?;
    Ok(match kind {
        DomainKind::Source => b.source,
        DomainKind::Target => b.target,
    })
}

/// One `[M × d_in]` token grid of local class `c` with its token roles.
pub fn sample_image_with(spec: &DomainSpec, c: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<Role>)> {
    if c >= spec.classes() {
        return Err(Error::Index(format!("class {c} of {}", spec.classes())));
    }
    let (d, m) = (spec.d_in(), spec.tokens());
    let std = spec.sigma / (d as f64).sqrt();
    let mut roles = Vec::with_capacity(m);
    roles.extend(std::iter::repeat(Role::Discriminative).take(spec.layout.n_disc));
    roles.extend(std::iter::repeat(Role::Domain).take(spec.layout.n_dom));
    roles.extend(std::iter::repeat(Role::Noise).take(spec.layout.n_noise));
    roles.shuffle(rng);
    let proto = spec.prototypes.row(c);
    let mut data = Vec::with_capacity(m * d);
    for role in &roles {
        let (base, mu): (&[f64], f64) = match role {
            Role::Discriminative => (proto, spec.mu_disc),
            Role::Domain => (&spec.domain, spec.mu_dom),
            Role::Noise => (proto, 0.0),
        };
        for &b in base.iter().take(d) {
            let n: f64 = StandardNormal.sample(rng);
            data.push(mu * b + std * n);
        }
    }
    Ok((Tensor::new(vec![m, d], data)?, roles))
}

pub fn sample_image(spec: &DomainSpec, c: usize, seed: u64) -> Result<(Tensor, Vec<Role>)> {
    sample_image_with(spec, c, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A labelled stack of images, `[B × M × d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    /// Episode-local labels in `0..N`.
    pub labels: Vec<usize>,
    /// `[B·M]` token roles.
    pub roles: Vec<Role>,
    /// Image identifiers, unique within an episode.
    pub ids: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws images for `labels` (episode-local) of the given domain classes.
pub fn sample_images(
    spec: &DomainSpec,
    classes: &[usize],
    labels: &[usize],
    first_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImageSet> {
    let (d, m) = (spec.d_in(), spec.tokens());
    let mut data = Vec::with_capacity(labels.len() * m * d);
    let mut roles = Vec::with_capacity(labels.len() * m);
    for &y in labels {
        let c = *classes.get(y).ok_or_else(|| Error::Index(format!("label {y} of {} classes", classes.len())))?;
        let (img, r) = sample_image_with(spec, c, rng)?;
        data.extend_from_slice(img.data());
        roles.extend(r);
    }
    Ok(ImageSet {
        images: Tensor::new(vec![labels.len(), m, d], data)?,
        labels: labels.to_vec(),
        roles,
        ids: (first_id..first_id + labels.len()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Local class indices into the domain, one per way.
    pub classes: Vec<usize>,
    pub support: ImageSet,
    pub query: ImageSet,
    pub seed: u64,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

/// `n_way` classes without replacement, `k_shot` support and `m_query`
/// query images per class. Labels are class-major.
pub fn sample_episode(spec: &DomainSpec, n_way: usize, k_shot: usize, m_query: usize, seed: u64) -> Result<Episode> {
    if n_way == 0 || n_way > spec.classes() {
        return Err(Error::Argument(format!("n_way = {n_way} outside [1, {}]", spec.classes())));
    }
    if k_shot == 0 || m_query == 0 {
        return Err(Error::Argument("k_shot and m_query must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..spec.classes()).collect();
    all.shuffle(&mut rng);
    let classes = all[..n_way].to_vec();
    let ys: Vec<usize> = (0..n_way).flat_map(|c| std::iter::repeat(c).take(k_shot)).collect();
    let yq: Vec<usize> = (0..n_way).flat_map(|c| std::iter::repeat(c).take(m_query)).collect();
    let support = sample_images(spec, &classes, &ys, 0, &mut rng)?;
    let query = sample_images(spec, &classes, &yq, ys.len(), &mut rng)?;
    Ok(Episode { classes, support, query, seed })
}

/// Uniform random labels over `n` classes.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..n)).collect()
}
