//! Toy teacher: a patch k-means tokenizer over the training corpus and a
//! pixel head mapping teacher-token grids back to images.
//!
//! The tokenizer half is frozen once fitted. The pixel head starts as a
//! plain centroid lookup plus a zero-initialised residual MLP, so before any
//! fine-tuning it reproduces the k-means reconstruction exactly; the residual
//! and the centroid table become trainable in the pixel fine-tuning stage.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::nn::{gelu, Linear, ParamStore};
use crate::quantizer::nearest_ids;

/// Row-major `B x L2` teacher-token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherTokens {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TeacherTokens {
    pub fn new(ids: Vec<u32>, batch: usize, len: usize, vocab: usize) -> Result<Self> {
        if ids.len() != batch * len {
            return Err(shape_err(format!("{} ids for {batch}x{len}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                size: vocab,
            });
        }
        Ok(Self { ids, batch, len })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let ids = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self {
            ids,
            batch: rows.len(),
            len: self.len,
        }
    }
}

/// Splits images into flattened `p x p x 3` patches, grid row-major.
pub fn patchify(images: &ImageBatch, p: usize) -> Result<Vec<f32>> {
    let (h, w) = (images.height, images.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err(format!("{h}x{w} image not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(images.data.len());
    for b in 0..images.batch {
        let img = images.image(b);
        for gy in 0..gh {
            for gx in 0..gw {
                for y in 0..p {
                    let row = ((gy * p + y) * w + gx * p) * 3;
                    out.extend_from_slice(&img[row..row + p * 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], batch: usize, size: usize, p: usize) -> Vec<f32> {
    let g = size / p;
    let mut out = vec![0f32; batch * size * size * 3];
    let plen = p * p * 3;
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                let src = &patches[((b * g + gy) * g + gx) * plen..][..plen];
                for y in 0..p {
                    let dst = ((b * size + gy * p + y) * size + gx * p) * 3;
                    out[dst..dst + p * 3].copy_from_slice(&src[y * p * 3..(y + 1) * p * 3]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KMeansReport {
    pub iterations: usize,
    pub inertia: f64,
    pub reseeded: usize,
}

/// Lloyd's algorithm with k-means++ seeding; empty clusters are re-seeded
/// with the point farthest from its centroid.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
    exec: Execution,
) -> Result<(Vec<f64>, KMeansReport)> {
    let n = points.len() / dim;
    if n < k || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k={k} points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist(row(i), &c));
        }
        centroids.extend(c);
    }

    let mut report = KMeansReport {
        iterations: 0,
        inertia: 0.0,
        reseeded: 0,
    };
    let mut assign = nearest_ids(points, &centroids, dim, exec);
    for it in 0..iters {
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a as usize] += 1;
            for (s, x) in sums[a as usize * dim..][..dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = dist(row(i), &centroids[assign[i] as usize * dim..][..dim]);
                        let dj = dist(row(j), &centroids[assign[j] as usize * dim..][..dim]);
                        di.total_cmp(&dj)
                    })
                    .unwrap();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                report.reseeded += 1;
            } else {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        let next = nearest_ids(points, &centroids, dim, exec);
        report.iterations = it + 1;
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
    }
    report.inertia = (0..n)
        .map(|i| dist(row(i), &centroids[assign[i] as usize * dim..][..dim]))
        .sum::<f64>()
        / n as f64;
    Ok((centroids, report))
}

/// Frozen patch tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTokenizer {
    pub patch: usize,
    pub image_size: usize,
    pub vocab: usize,
    /// `vocab x (patch^2 * 3)` centroids, row-major.
    pub centroids: Vec<f32>,
}

impl TeacherTokenizer {
    /// Fits `vocab` centroids on at most `max_patches` patches of `images`.
    pub fn fit(
        images: &ImageBatch,
        patch: usize,
        vocab: usize,
        max_patches: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<(Self, KMeansReport)> {
        let plen = patch * patch * 3;
        let all = patchify(images, patch)?;
        let total = all.len() / plen;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC);
        let take: Vec<usize> = if total > max_patches {
            rand::seq::index::sample(&mut rng, total, max_patches).into_vec()
        } else {
            (0..total).collect()
        };
        let pts: Vec<f64> = take
            .iter()
            .flat_map(|&i| all[i * plen..(i + 1) * plen].iter().map(|&v| v as f64))
            .collect();
        let (c, report) = kmeans(&pts, plen, vocab, 30, seed, exec)?;
        Ok((
            Self {
                patch,
                image_size: images.height,
                vocab,
                centroids: c.into_iter().map(|v| v as f32).collect(),
            },
            report,
        ))
    }

    pub fn grid_len(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Teacher tokens `M_g` for a batch.
    pub fn tokenize(&self, images: &ImageBatch, exec: Execution) -> Result<TeacherTokens> {
        if images.height != self.image_size || images.width != self.image_size {
            return Err(shape_err(format!(
                "teacher expects {0}x{0} images, got {1}x{2}",
                self.image_size, images.height, images.width
            )));
        }
        let patches: Vec<f64> = patchify(images, self.patch)?.into_iter().map(|v| v as f64).collect();
        let codes: Vec<f64> = self.centroids.iter().map(|&v| v as f64).collect();
        let ids = nearest_ids(&patches, &codes, self.patch_len(), exec);
        TeacherTokens::new(ids, images.batch, self.grid_len(), self.vocab)
    }

    /// Centroid-lookup reconstruction.
    pub fn reconstruct(&self, tokens: &TeacherTokens) -> Result<ImageBatch> {
        let plen = self.patch_len();
        let patches: Vec<f32> = tokens
            .ids
            .iter()
            .flat_map(|&t| {
                self.centroids[t as usize * plen..(t as usize + 1) * plen]
                    .iter()
                    .copied()
            })
            .collect();
        let data = unpatchify(&patches, tokens.batch, self.image_size, self.patch)
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        ImageBatch::new(data, tokens.batch, self.image_size, self.image_size)
    }
}

/// Pixel head over (soft) teacher-token distributions.
///
/// `image = unpatchify(P @ table + residual(P @ embed, neighbours))`, where
/// `P` is `B x L2 x V` token probabilities (one-hot for hard tokens). The
/// residual MLP sees each patch's embedding together with its four grid
/// neighbours and has a zero-initialised output layer.
#[derive(Clone, Debug)]
pub struct PixelHead {
    pub store: ParamStore,
    table: Tensor,
    embed: Tensor,
    fc1: Linear,
    fc2: Linear,
    grid: usize,
    patch: usize,
    vocab: usize,
}

pub const PIXEL_EMBED: usize = 16;

impl PixelHead {
    pub fn new(teacher: &TeacherTokenizer, seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x91C5);
        let mut store = ParamStore::new("pixel_head", DType::F32, device);
        let plen = teacher.patch_len();
        let table = store.from_values(
            "table",
            &[teacher.vocab, plen],
            teacher.centroids.iter().map(|&v| v as f64).collect(),
        )?;
        let embed = store.normal("embed", &[teacher.vocab, PIXEL_EMBED], 0.5, &mut rng)?;
        let fc1 = Linear::new(&mut store, "fc1", 5 * PIXEL_EMBED, 64, true, &mut rng)?;
        let fc2 = Linear::zeros(&mut store, "fc2", 64, plen)?;
        Ok(Self {
            store,
            table,
            embed,
            fc1,
            fc2,
            grid: teacher.image_size / teacher.patch,
            patch: teacher.patch,
            vocab: teacher.vocab,
        })
    }

    pub fn one_hot(&self, tokens: &TeacherTokens) -> Result<Tensor> {
        let mut data = vec![0f32; tokens.ids.len() * self.vocab];
        for (i, &t) in tokens.ids.iter().enumerate() {
            data[i * self.vocab + t as usize] = 1.0;
        }
        Ok(Tensor::from_vec(
            data,
            (tokens.batch, tokens.len, self.vocab),
            self.table.device(),
        )?)
    }

    /// Neighbour features `B x L2 x 5E`: self, up, down, left, right
    /// (zero-padded at the border).
    fn neighbourhood(&self, e: &Tensor) -> Result<Tensor> {
        let (b, _, d) = e.dims3()?;
        let g = self.grid;
        let e4 = e.reshape((b, g, g, d))?;
        let zrow = Tensor::zeros((b, 1, g, d), e.dtype(), e.device())?;
        let zcol = Tensor::zeros((b, g, 1, d), e.dtype(), e.device())?;
        let up = Tensor::cat(&[&zrow, &e4.narrow(1, 0, g - 1)?], 1)?;
        let down = Tensor::cat(&[&e4.narrow(1, 1, g - 1)?, &zrow], 1)?;
        let left = Tensor::cat(&[&zcol, &e4.narrow(2, 0, g - 1)?], 2)?;
        let right = Tensor::cat(&[&e4.narrow(2, 1, g - 1)?, &zcol], 2)?;
        Ok(Tensor::cat(&[&e4, &up, &down, &left, &right], 3)?.reshape((b, g * g, 5 * d))?)
    }

    /// Raw (unclamped) pixels `B x H x W x 3` from token probabilities.
    pub fn forward(&self, probs: &Tensor) -> Result<Tensor> {
        let (b, l, v) = probs.dims3()?;
        if l != self.grid * self.grid || v != self.vocab {
            return Err(shape_err(format!(
                "pixel head expects {}x{}, got {l}x{v}",
                self.grid * self.grid,
                self.vocab
            )));
        }
        let flat = probs.reshape((b * l, v))?;
        let base = flat.matmul(&self.table)?;
        let e = flat.matmul(&self.embed)?.reshape((b, l, PIXEL_EMBED))?;
        let h = gelu(&self.fc1.forward(&self.neighbourhood(&e)?)?)?;
        let patches = (base.reshape((b, l, ()))? + self.fc2.forward(&h)?)?;
        let (g, p) = (self.grid, self.patch);
        Ok(patches
            .reshape((b, g, g, p, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, g * p, g * p, 3))?)
    }

    /// Clamped images from hard tokens.
    pub fn decode(&self, tokens: &TeacherTokens) -> Result<ImageBatch> {
        ImageBatch::from_tensor_clamped(&self.forward(&self.one_hot(tokens)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    #[test]
    fn patchify_round_trips() {
        let ds = synthetic_dataset(0, 0, 3, 16, Execution::Sequential);
        let p = patchify(&ds.images, 4).unwrap();
        assert_eq!(unpatchify(&p, 3, 16, 4), ds.images.data);
        assert!(patchify(&ds.images, 5).is_err());
    }

    #[test]
    fn kmeans_separates_clusters() {
        let pts = vec![0.0, 0.1, -0.1, 10.0, 10.1, 9.9];
        let (c, rep) = kmeans(&pts, 1, 2, 10, 0, Execution::Sequential).unwrap();
        let mut c = c;
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.0).abs() < 1e-9 && (c[1] - 10.0).abs() < 1e-9, "{c:?}");
        assert!(rep.inertia < 0.01);
    }

    #[test]
    fn tokenizer_is_deterministic_with_grid_length() {
        let ds = synthetic_dataset(1, 0, 32, 16, Execution::Parallel);
        let (t, _) = TeacherTokenizer::fit(&ds.images, 4, 16, 10_000, 0, Execution::Parallel).unwrap();
        assert_eq!(t.grid_len(), 16);
        let a = t.tokenize(&ds.images, Execution::Parallel).unwrap();
        let b = t.tokenize(&ds.images, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len, 16);
        let wrong = synthetic_dataset(1, 0, 1, 8, Execution::Parallel);
        assert!(t.tokenize(&wrong.images, Execution::Parallel).is_err());
    }

    #[test]
    fn fresh_pixel_head_equals_centroid_lookup() {
        let ds = synthetic_dataset(2, 0, 16, 16, Execution::Parallel);
        let (t, _) = TeacherTokenizer::fit(&ds.images, 4, 8, 10_000, 0, Execution::Parallel).unwrap();
        let tok = t.tokenize(&ds.images, Execution::Parallel).unwrap();
        let head = PixelHead::new(&t, 0, &Device::Cpu).unwrap();
        let a = head.decode(&tok).unwrap();
        let b = t.reconstruct(&tok).unwrap();
        let err = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0f32, f32::max);
        assert!(err < 1e-5, "{err}");
    }
}
