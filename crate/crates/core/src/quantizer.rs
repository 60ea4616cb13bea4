//! Nearest-neighbour vector quantization against a learned codebook.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::nn::ParamStore;

/// `n x d` table of code vectors.
#[derive(Clone, Debug)]
pub struct Codebook {
    vectors: Var,
    l2_normalized: bool,
}

impl Codebook {
    /// Registers a randomly initialised codebook in `store`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        size: usize,
        dim: usize,
        l2_normalized: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidArgument("codebook must be non-empty".into()));
        }
        store.normal("codebook", &[size, dim], 1.0, rng)?;
        let name = format!("{}.codebook", store.group());
        let vectors = store.get(&name).expect("just registered").clone();
        let cb = Self { vectors, l2_normalized };
        cb.renormalize()?;
        Ok(cb)
    }

    /// Wraps explicit rows; mostly for tests and loading.
    pub fn from_rows(rows: &[Vec<f64>], l2_normalized: bool, device: &Device) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::InvalidArgument("codebook must be non-empty".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(shape_err("ragged codebook rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (rows.len(), d), device)?;
        let cb = Self {
            vectors: Var::from_tensor(&t)?,
            l2_normalized,
        };
        cb.renormalize()?;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn l2_normalized(&self) -> bool {
        self.l2_normalized
    }

    pub fn vectors(&self) -> &Tensor {
        self.vectors.as_tensor()
    }

    pub fn var(&self) -> &Var {
        &self.vectors
    }

    /// Restores unit row norms after a parameter update (no-op when the
    /// codebook is not normalised).
    pub fn renormalize(&self) -> Result<()> {
        if self.l2_normalized {
            let v = l2_normalize(&self.vectors.as_tensor().detach())?;
            self.vectors.set(&v)?;
        }
        Ok(())
    }

    /// Applies the codebook's normalisation to encoder features.
    pub fn prepare(&self, ze: &Tensor) -> Result<Tensor> {
        if self.l2_normalized {
            l2_normalize(ze)
        } else {
            Ok(ze.clone())
        }
    }

    fn host_rows(&self) -> Result<Vec<f64>> {
        Ok(self
            .vectors
            .as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?)
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `Z_q` together with the chosen code indices, row-major `B x K`.
#[derive(Clone, Debug)]
pub struct QuantizedLatent {
    pub data: Tensor,
    pub ids: Vec<u32>,
}

impl QuantizedLatent {
    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Brute-force nearest neighbour over row-major `queries` (`m x d`) and
/// `codes` (`n x d`); ties go to the lowest index.
pub fn nearest_ids(queries: &[f64], codes: &[f64], dim: usize, exec: Execution) -> Vec<u32> {
    let m = queries.len() / dim;
    exec.map_range(m, |r| {
        let q = &queries[r * dim..(r + 1) * dim];
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for (i, c) in codes.chunks_exact(dim).enumerate() {
            let d: f64 = q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i as u32;
            }
        }
        best
    })
}

/// Quantizes `ze` (`B x K x d`) to its nearest codebook rows.
pub fn quantize(ze: &Tensor, cb: &Codebook, exec: Execution) -> Result<QuantizedLatent> {
    let (b, k, d) = ze.dims3()?;
    if d != cb.dim() {
        return Err(shape_err(format!("feature dim {d} != codebook dim {}", cb.dim())));
    }
    let prepared = cb.prepare(&ze.detach())?;
    let host: Vec<f64> = prepared.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if host.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    let ids = nearest_ids(&host, &cb.host_rows()?, d, exec);
    let data = gather_rows(cb.vectors(), &ids)?.reshape((b, k, d))?;
    Ok(QuantizedLatent { data, ids })
}

fn gather_rows(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let idx = Tensor::from_vec(ids.to_vec(), ids.len(), table.device())?;
    Ok(table.index_select(&idx, 0)?)
}

/// Exact table rows for `ids` (`batch x len`).
pub fn lookup(ids: &[u32], batch: usize, cb: &Codebook) -> Result<QuantizedLatent> {
    if batch == 0 || !ids.len().is_multiple_of(batch) {
        return Err(shape_err(format!("{} ids for batch {batch}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cb.size()) {
        return Err(Error::OutOfRange {
            index: bad as usize,
            size: cb.size(),
        });
    }
    let data = gather_rows(cb.vectors(), ids)?.reshape((batch, ids.len() / batch, cb.dim()))?;
    Ok(QuantizedLatent {
        data,
        ids: ids.to_vec(),
    })
}

/// `mean_pos ||sg(ze) - zq||^2 + beta * ||ze - sg(zq)||^2`: the first term
/// moves codes toward features, the second commits features to codes.
pub fn quantizer_loss(ze: &Tensor, zq: &Tensor, beta: f64) -> Result<Tensor> {
    if ze.dims() != zq.dims() {
        return Err(shape_err(format!("{:?} vs {:?}", ze.dims(), zq.dims())));
    }
    let codebook_term = (ze.detach() - zq)?.sqr()?.sum(D::Minus1)?.mean_all()?;
    let commit_term = (ze - zq.detach())?.sqr()?.sum(D::Minus1)?.mean_all()?;
    Ok((codebook_term + (commit_term * beta)?)?)
}

/// Forward value `zq`, gradient copied straight to `ze`.
pub fn straight_through(ze: &Tensor, zq: &Tensor) -> Result<Tensor> {
    Ok((ze + (zq - ze)?.detach())?)
}

/// Fraction of the `n` codes that appear in `ids`.
pub fn codebook_usage(ids: &[u32], n: usize) -> Result<f64> {
    if ids.is_empty() || n == 0 {
        return Err(Error::InvalidArgument("empty id stream or codebook".into()));
    }
    let distinct: BTreeSet<u32> = ids.iter().copied().collect();
    Ok(distinct.len() as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cb2(l2: bool) -> Codebook {
        Codebook::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], l2, &Device::Cpu).unwrap()
    }

    fn ze(rows: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (1, rows.len(), 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn two_code_examples() {
        // Distances 0.05 vs 1.45.
        let q = quantize(&ze(&[[0.9, 0.2]]), &cb2(false), Execution::Sequential).unwrap();
        assert_eq!(q.ids, vec![0]);
        // Exact tie goes to the lower index, with or without normalisation.
        for l2 in [false, true] {
            let q = quantize(&ze(&[[0.5, 0.5]]), &cb2(l2), Execution::Sequential).unwrap();
            assert_eq!(q.ids, vec![0]);
        }
    }

    #[test]
    fn exact_entry_is_a_fixpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cb = Codebook::from_rows(&rows, false, &Device::Cpu).unwrap();
        let input = Tensor::from_vec(rows[7].clone(), (1, 1, 4), &Device::Cpu).unwrap();
        let q = quantize(&input, &cb, Execution::Sequential).unwrap();
        assert_eq!(q.ids, vec![7]);
        let dist: f64 = (q.data - input)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert_eq!(dist, 0.0);
    }

    #[test]
    fn lookup_bounds_and_round_trip() {
        let cb = cb2(false);
        let l = lookup(&[0], 1, &cb).unwrap();
        assert_eq!(l.data.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            lookup(&[2], 1, &cb),
            Err(Error::OutOfRange { index: 2, size: 2 })
        ));
        let q = quantize(&ze(&[[0.1, 0.7], [0.9, 0.1]]), &cb, Execution::Sequential).unwrap();
        let back = lookup(&q.ids, 1, &cb).unwrap();
        let a: Vec<f64> = q.data.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = back.data.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        assert!(Codebook::from_rows(&[], false, &Device::Cpu).is_err());
        let bad = Tensor::from_vec(vec![f64::NAN, 0.0], (1, 1, 2), &Device::Cpu).unwrap();
        assert!(matches!(
            quantize(&bad, &cb2(false), Execution::Sequential),
            Err(Error::NonFinite(_))
        ));
        let wrong_dim = Tensor::zeros((1, 1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(quantize(&wrong_dim, &cb2(false), Execution::Sequential).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = ze(&[[1.0, 0.0]]);
        let z = ze(&[[0.0, 0.0]]);
        let l: f64 = quantizer_loss(&a, &z, 0.25).unwrap().to_scalar().unwrap();
        assert!((l - 1.25).abs() < 1e-12);
        let l0: f64 = quantizer_loss(&a, &a, 0.25).unwrap().to_scalar().unwrap();
        assert_eq!(l0, 0.0);
        let a2 = ze(&[[2.0, 0.0]]);
        let l2: f64 = quantizer_loss(&a2, &z, 0.25).unwrap().to_scalar().unwrap();
        assert!((l2 - 4.0 * l).abs() < 1e-12);
    }

    #[test]
    fn normalized_codebook_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new("q", DType::F32, &Device::Cpu);
        let cb = Codebook::new(&mut store, 64, 8, true, &mut rng).unwrap();
        cb.var().set(&(cb.vectors() * 3.0).unwrap()).unwrap();
        cb.renormalize().unwrap();
        let norms: Vec<f32> = cb
            .vectors()
            .sqr()
            .unwrap()
            .sum(1)
            .unwrap()
            .sqrt()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-6));
    }

    #[test]
    fn usage_fraction() {
        assert_eq!(codebook_usage(&[0, 1, 2, 3], 4).unwrap(), 1.0);
        assert_eq!(codebook_usage(&[1, 1, 1], 4).unwrap(), 0.25);
        assert!(codebook_usage(&[], 4).is_err());
    }
}
