//! Virtual slides with controlled stain variation.
//!
//! A slide is a perturbed H&E optical-density matrix plus a background
//! intensity. Patch content (blob-shaped hematoxylin and eosin concentration
//! fields) depends only on a content seed and class, and pixels follow the
//! Beer-Lambert transmission model
//!
//! ```text
//! pixel_c = background_c * exp(-(C_h * M[h][c] + C_e * M[e][c]))
//! ```
//!
//! so a slide changes colour but never masks or labels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;

/// Reference optical-density rows (hematoxylin, eosin) per RGB channel.
pub const REFERENCE_STAIN: [[f64; 3]; 2] = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]];

/// Largest background darkening at perturbation 1.
const BACKGROUND_SPREAD: f64 = 0.2;
/// Hematoxylin concentration above which a pixel belongs to the mask.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SlideSpec {
    pub slide_id: u32,
    pub stain_matrix: [[f64; 3]; 2],
    pub background: [f64; 3],
    pub rng_seed: u64,
}

/// Build a slide whose stain entries are the reference scaled by
/// `1 + perturbation * u`, `u` uniform in `[-1, 1]`.
pub fn make_slide(slide_id: u32, seed: u64, perturbation: f64) -> Result<SlideSpec> {
    if !(0.0..=1.0).contains(&perturbation) {
        return Err(Error::invalid(format!(
            "perturbation {perturbation} outside [0,1]"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut stain_matrix = REFERENCE_STAIN;
    for row in stain_matrix.iter_mut() {
        for v in row.iter_mut() {
            let u = rng.uniform(-1.0, 1.0);
            *v = (*v * (1.0 + perturbation * u)).max(0.0);
        }
    }
    let mut background = [1.0; 3];
    for b in background.iter_mut() {
        *b = 1.0 - BACKGROUND_SPREAD * perturbation * rng.unit();
    }
    Ok(SlideSpec {
        slide_id,
        stain_matrix,
        background,
        rng_seed: seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub slide_id: u32,
    pub content_label: usize,
    pub content_fraction: f64,
    /// Row-major `H x W`, values in `{0, 1}`.
    pub mask: Vec<u8>,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| m as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub size: usize,
    pub classes: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            size: 32,
            classes: 2,
        }
    }
}

/// Hematoxylin and eosin concentration fields for one patch.
pub fn concentration_fields(size: usize, content_seed: u64, class_id: usize) -> [Vec<f64>; 2] {
    let mut rng = Rng::new(content_seed);
    let scale = size as f64 / 32.0;
    let mut h = vec![0.0; size * size];
    let mut e = vec![0.0; size * size];

    // Nucleus-like blobs; their number grows with the class id.
    let blobs = 3 + 5 * class_id + rng.below(3);
    for _ in 0..blobs {
        let cy = rng.uniform(0.0, size as f64);
        let cx = rng.uniform(0.0, size as f64);
        let sigma = rng.uniform(1.5, 3.0) * scale;
        let amp = rng.uniform(0.9, 1.5);
        splat(&mut h, size, cy, cx, sigma, amp);
    }
    // Broad stroma background.
    for _ in 0..3 {
        let cy = rng.uniform(0.0, size as f64);
        let cx = rng.uniform(0.0, size as f64);
        let sigma = rng.uniform(6.0, 12.0) * scale;
        let amp = rng.uniform(0.2, 0.6);
        splat(&mut e, size, cy, cx, sigma, amp);
    }
    e.iter_mut().for_each(|v| *v += 0.15);
    [h, e]
}

fn splat(field: &mut [f64], size: usize, cy: f64, cx: f64, sigma: f64, amp: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            field[y * size + x] += amp * libm::exp(-(dy * dy + dx * dx) * inv);
        }
    }
}

/// Beer-Lambert transmission of concentration fields through a slide's stains.
pub fn beer_lambert(slide: &SlideSpec, fields: &[Vec<f64>; 2], size: usize) -> Tensor {
    let plane = size * size;
    let mut pixels = vec![0.0; 3 * plane];
    for c in 0..3 {
        let (mh, me) = (slide.stain_matrix[0][c], slide.stain_matrix[1][c]);
        for i in 0..plane {
            let od = fields[0][i] * mh + fields[1][i] * me;
            pixels[c * plane + i] = slide.background[c] * libm::exp(-od);
        }
    }
    Tensor::from_parts(vec![3, size, size], pixels)
}

pub fn render_patch(
    slide: &SlideSpec,
    content_seed: u64,
    class_id: usize,
    config: &RenderConfig,
) -> Result<Patch> {
    if class_id >= config.classes {
        return Err(Error::invalid(format!(
            "class {class_id} not in 0..{}",
            config.classes
        )));
    }
    let size = config.size;
    let fields = concentration_fields(size, content_seed, class_id);
    let mask: Vec<u8> = fields[0]
        .iter()
        .map(|&c| u8::from(c > MASK_THRESHOLD))
        .collect();
    let content_fraction = mask.iter().map(|&m| m as f64).sum::<f64>() / mask.len() as f64;
    Ok(Patch {
        pixels: beer_lambert(slide, &fields, size),
        slide_id: slide.slide_id,
        content_label: class_id,
        content_fraction,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub flip_prob: f64,
    /// Half-width of the per-channel brightness and contrast jitter.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: 28,
            flip_prob: 0.5,
            jitter: 0.1,
        }
    }
}

/// Random crop, horizontal flip and per-channel brightness/contrast jitter.
pub fn augment_view(patch: &Patch, config: &AugmentConfig, seed: u64) -> Result<Tensor> {
    let size = patch.size();
    let crop = config.crop;
    if crop == 0 || crop > size {
        return Err(Error::invalid(format!(
            "crop {crop} larger than patch {size}"
        )));
    }
    let mut rng = Rng::new(seed);
    let oy = rng.below(size - crop + 1);
    let ox = rng.below(size - crop + 1);
    let flip = rng.bernoulli(config.flip_prob);
    let src = patch.pixels.data();
    let mut out = vec![0.0; 3 * crop * crop];
    for c in 0..3 {
        let contrast = 1.0 + config.jitter * rng.uniform(-1.0, 1.0);
        let brightness = config.jitter * rng.uniform(-1.0, 1.0);
        let plane = &src[c * size * size..(c + 1) * size * size];
        let mut mean = 0.0;
        for y in 0..crop {
            for x in 0..crop {
                mean += plane[(oy + y) * size + ox + x];
            }
        }
        mean /= (crop * crop) as f64;
        let shift = (1.0 - contrast) * mean + brightness;
        for y in 0..crop {
            for x in 0..crop {
                let sx = if flip { crop - 1 - x } else { x };
                let v = plane[(oy + y) * size + ox + sx] * contrast + shift;
                out[(c * crop + y) * crop + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::from_parts(vec![3, crop, crop], out))
}

/// Centre crop without any randomness, for evaluation-time embedding.
pub fn center_view(patch: &Patch, crop: usize) -> Result<Tensor> {
    let size = patch.size();
    if crop == 0 || crop > size {
        return Err(Error::invalid(format!(
            "crop {crop} larger than patch {size}"
        )));
    }
    let o = (size - crop) / 2;
    let src = patch.pixels.data();
    let mut out = Vec::with_capacity(3 * crop * crop);
    for c in 0..3 {
        for y in 0..crop {
            let start = c * size * size + (o + y) * size + o;
            out.extend_from_slice(&src[start..start + crop]);
        }
    }
    Ok(Tensor::from_parts(vec![3, crop, crop], out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub slide_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub pairs: Vec<ViewPair>,
    pub slide_ids: Vec<u32>,
    /// Dataset indices of the sampled patches.
    pub patch_indices: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First views stacked as `[N, 3, h, w]`.
    pub fn first_views(&self) -> Tensor {
        let views: Vec<Tensor> = self.pairs.iter().map(|p| p.view1.clone()).collect();
        Tensor::stack(&views).expect("views share a shape")
    }

    pub fn second_views(&self) -> Tensor {
        let views: Vec<Tensor> = self.pairs.iter().map(|p| p.view2.clone()).collect();
        Tensor::stack(&views).expect("views share a shape")
    }
}

/// A collection of patches grouped by slide.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub patches: Vec<Patch>,
}

impl Dataset {
    pub fn new(patches: Vec<Patch>) -> Self {
        Dataset { patches }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch indices per slide id, slides in ascending id order.
    pub fn by_slide(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.patches.iter().enumerate() {
            map.entry(p.slide_id).or_default().push(i);
        }
        map
    }

    pub fn slide_count(&self) -> usize {
        self.by_slide().len()
    }

    /// Keep the patches whose position within their slide satisfies `keep`.
    pub fn split_within_slides(&self, keep: impl Fn(usize, usize) -> bool) -> Dataset {
        let mut out = Vec::new();
        for idx in self.by_slide().values() {
            for (pos, &i) in idx.iter().enumerate() {
                if keep(pos, idx.len()) {
                    out.push(self.patches[i].clone());
                }
            }
        }
        Dataset::new(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_slides: usize,
    pub patches_per_slide: usize,
    pub perturbation: f64,
    pub render: RenderConfig,
}

const STREAM_SLIDE: u64 = 1;
const STREAM_CONTENT: u64 = 2;

/// Slide `s` of a generated dataset.
pub fn dataset_slide(config: &DatasetConfig, s: usize) -> Result<SlideSpec> {
    make_slide(
        s as u32,
        mix_seed(config.seed, &[STREAM_SLIDE, s as u64]),
        config.perturbation,
    )
}

/// Content seed of patch `j` on slide `s`.
pub fn dataset_content_seed(config: &DatasetConfig, s: usize, j: usize) -> u64 {
    mix_seed(config.seed, &[STREAM_CONTENT, s as u64, j as u64])
}

/// Render a full dataset; classes are assigned round-robin within a slide.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let mut patches = Vec::with_capacity(config.n_slides * config.patches_per_slide);
    for s in 0..config.n_slides {
        let slide = dataset_slide(config, s)?;
        for j in 0..config.patches_per_slide {
            let class = j % config.render.classes;
            patches.push(render_patch(
                &slide,
                dataset_content_seed(config, s, j),
                class,
                &config.render,
            )?);
        }
    }
    Ok(Dataset::new(patches))
}

/// Draw `n / k` distinct slides with `k` distinct patches each, and two
/// independently augmented views per patch.
pub fn sample_batch(
    dataset: &Dataset,
    n: usize,
    k: usize,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<MiniBatch> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "patches per slide k={k} must be at least 2"
        )));
    }
    if n == 0 || n % k != 0 {
        return Err(Error::invalid(format!(
            "batch size {n} not divisible by k={k}"
        )));
    }
    let slides = dataset.by_slide();
    let wanted = n / k;
    if slides.len() < wanted {
        return Err(Error::degenerate(format!(
            "batch needs {wanted} slides, dataset has {}",
            slides.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut ids: Vec<u32> = slides.keys().copied().collect();
    rng.shuffle(&mut ids);
    ids.truncate(wanted);

    let mut pairs = Vec::with_capacity(n);
    let mut slide_ids = Vec::with_capacity(n);
    let mut patch_indices = Vec::with_capacity(n);
    for id in ids {
        let mut members = slides[&id].clone();
        if members.len() < k {
            return Err(Error::degenerate(format!(
                "slide {id} has {} patches, batch needs {k}",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for &i in &members[..k] {
            let (s1, s2) = (rng.next_u64(), rng.next_u64());
            let patch = &dataset.patches[i];
            pairs.push(ViewPair {
                view1: augment_view(patch, augment, s1)?,
                view2: augment_view(patch, augment, s2)?,
                slide_id: id,
            });
            slide_ids.push(id);
            patch_indices.push(i);
        }
    }
    Ok(MiniBatch {
        pairs,
        slide_ids,
        patch_indices,
    })
}
