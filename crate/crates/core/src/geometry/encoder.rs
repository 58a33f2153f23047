//! PointNet-style set encoder: shared per-point MLP, coordinate-wise max-pool,
//! post-pool MLP, LayerNorm.

use rand::Rng;

use super::PointCloud;
use crate::error::{dim_err, Error, Result};
use crate::nn::dense::{stack_backward, stack_forward, StackTrace};
use crate::nn::params::join;
use crate::nn::tensor::axpy;
use crate::nn::{Activation, DenseLayer, LayerNorm, Params, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder {
    /// Shared across points; the first layer takes 3 inputs.
    pub point_layers: Vec<DenseLayer>,
    pub post_layers: Vec<DenseLayer>,
    pub norm: LayerNorm,
    pub n_points: usize,
}

/// Forward-pass state needed by [`PointEncoder::backward`].
#[derive(Debug, Clone)]
pub struct PointEncoderCache {
    /// Index of the point that won the max for each pooled channel.
    pub argmax: Vec<usize>,
    pub pooled: Vec<f64>,
    post: StackTrace,
}

impl PointEncoder {
    /// `point_widths` lists per-point layer widths (ReLU); one tanh post-pool
    /// layer maps the pooled vector to `out_dim`.
    pub fn new<R: Rng + ?Sized>(
        point_widths: &[usize],
        out_dim: usize,
        n_points: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if point_widths.is_empty() || point_widths.contains(&0) {
            return Err(Error::Config("point encoder needs non-empty positive widths".into()));
        }
        if n_points == 0 || out_dim < 2 {
            return Err(Error::Config("point encoder needs N >= 1 and D >= 2".into()));
        }
        let mut in_dim = 3;
        let mut point_layers = Vec::new();
        for &w in point_widths {
            point_layers.push(DenseLayer::new(in_dim, w, Activation::Relu, rng));
            in_dim = w;
        }
        let post_layers = vec![DenseLayer::new(in_dim, out_dim, Activation::Tanh, rng)];
        Ok(Self {
            point_layers,
            post_layers,
            norm: LayerNorm::new(out_dim),
            n_points,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            point_layers: self.point_layers.iter().map(DenseLayer::zeros_like).collect(),
            post_layers: self.post_layers.iter().map(DenseLayer::zeros_like).collect(),
            norm: self.norm.zeros_like(),
            n_points: self.n_points,
        }
    }

    fn point_matrix(points: &[[f64; 3]]) -> Tensor2 {
        Tensor2::from_vec(points.len(), 3, points.concat()).expect("finite points")
    }

    /// Runs the per-point MLP on every row, returning per-layer (input, pre, out).
    fn per_point(&self, x0: Tensor2) -> Result<Vec<(Tensor2, Tensor2, Tensor2)>> {
        let mut trace = Vec::with_capacity(self.point_layers.len());
        let mut cur = x0;
        for layer in &self.point_layers {
            let (pre, out) = layer.forward_rows(&cur)?;
            trace.push((cur, pre, out.clone()));
            cur = out;
        }
        Ok(trace)
    }

    /// Streams points one at a time through every per-point layer, keeping
    /// only the running maxima. Arithmetic matches `DenseLayer::forward_rows`,
    /// which backward uses to recompute the winning rows.
    fn pool_streaming(&self, points: &[[f64; 3]]) -> (Vec<f64>, Vec<usize>) {
        let transposed: Vec<Tensor2> = self.point_layers.iter().map(|l| l.weight.transpose()).collect();
        let width = self.point_layers.last().expect("at least one point layer").out_dim();
        let mut pooled = vec![f64::NEG_INFINITY; width];
        let mut argmax = vec![0usize; width];
        let mut cur: Vec<f64> = Vec::with_capacity(width);
        let mut next: Vec<f64> = Vec::with_capacity(width);
        let last = self.point_layers.len() - 1;
        for (i, p) in points.iter().enumerate() {
            cur.clear();
            cur.extend_from_slice(p);
            for (li, (layer, wt)) in self.point_layers.iter().zip(&transposed).enumerate() {
                next.clear();
                next.resize(layer.out_dim(), 0.0);
                if cur.len() == 3 {
                    let (x0, x1, x2) = (cur[0], cur[1], cur[2]);
                    let n = next.len();
                    let (b, w0, w1, w2) = (&layer.bias[..n], &wt.row(0)[..n], &wt.row(1)[..n], &wt.row(2)[..n]);
                    for j in 0..n {
                        next[j] = b[j] + x0 * w0[j] + x1 * w1[j] + x2 * w2[j];
                    }
                } else {
                    next.copy_from_slice(&layer.bias);
                    for (k, &xk) in cur.iter().enumerate() {
                        axpy(xk, wt.row(k), &mut next);
                    }
                }
                let act = layer.activation;
                if li == last {
                    let n = next.len();
                    let (best, arg) = (&mut pooled[..n], &mut argmax[..n]);
                    for j in 0..n {
                        let v = act.apply(next[j]);
                        if v > best[j] {
                            best[j] = v;
                            arg[j] = i;
                        }
                    }
                } else {
                    next.iter_mut().for_each(|v| *v = act.apply(*v));
                    std::mem::swap(&mut cur, &mut next);
                }
            }
        }
        (pooled, argmax)
    }

    /// Channel-major pooling for a single per-point layer: a vectorisable max
    /// pass, then a scan for the first point attaining it (ties → lowest index).
    fn pool_single_layer(&self, points: &[[f64; 3]]) -> (Vec<f64>, Vec<usize>) {
        let layer = &self.point_layers[0];
        let n = points.len();
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
        let zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
        let act = layer.activation;
        let mut vals = vec![0.0; n];
        let mut pooled = Vec::with_capacity(layer.out_dim());
        let mut argmax = Vec::with_capacity(layer.out_dim());
        for j in 0..layer.out_dim() {
            let w = layer.weight.row(j);
            let (b, w0, w1, w2) = (layer.bias[j], w[0], w[1], w[2]);
            let affine = |i: usize| b + xs[i] * w0 + ys[i] * w1 + zs[i] * w2;
            if act == Activation::Relu {
                for (i, v) in vals.iter_mut().enumerate() {
                    let z = affine(i);
                    *v = if z > 0.0 { z } else { 0.0 };
                }
            } else {
                for (i, v) in vals.iter_mut().enumerate() {
                    *v = act.apply(affine(i));
                }
            }
            let mut lanes = [f64::NEG_INFINITY; 4];
            let mut chunks = vals.chunks_exact(4);
            for c in &mut chunks {
                for l in 0..4 {
                    lanes[l] = if c[l] > lanes[l] { c[l] } else { lanes[l] };
                }
            }
            let mut best = lanes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in chunks.remainder() {
                best = best.max(v);
            }
            let winner = vals.iter().position(|&v| v == best).expect("maximum is attained");
            pooled.push(best);
            argmax.push(winner);
        }
        (pooled, argmax)
    }

    pub fn encode(&self, pc: &PointCloud) -> Result<Vec<f64>> {
        Ok(self.forward(pc)?.0)
    }

    pub fn forward(&self, pc: &PointCloud) -> Result<(Vec<f64>, PointEncoderCache)> {
        if pc.len() != self.n_points {
            return Err(dim_err(format!(
                "point encoder expects {} points, got {}",
                self.n_points,
                pc.len()
            )));
        }
        let (pooled, argmax) = if self.point_layers.len() == 1 {
            self.pool_single_layer(pc.points())
        } else {
            self.pool_streaming(pc.points())
        };
        let post = stack_forward(&self.post_layers, &pooled)?;
        let feature = self.norm.forward(post.output())?;
        Ok((
            feature,
            PointEncoderCache {
                argmax,
                pooled,
                post,
            },
        ))
    }

    /// Accumulates parameter gradients into `acc`. Max-pool gradients go only
    /// to the winning point of each channel (lowest index on ties).
    pub fn backward(
        &self,
        pc: &PointCloud,
        cache: &PointEncoderCache,
        grad_feature: &[f64],
        acc: &mut PointEncoder,
    ) -> Result<()> {
        let grad_post = self
            .norm
            .backward_accumulate(cache.post.output(), grad_feature, &mut acc.norm)?;
        let grad_pooled =
            stack_backward(&self.post_layers, &cache.post, &grad_post, &mut acc.post_layers)?;

        let mut rows: Vec<usize> = cache.argmax.clone();
        rows.sort_unstable();
        rows.dedup();
        let selected: Vec<[f64; 3]> = rows.iter().map(|&i| pc.points()[i]).collect();
        let trace = self.per_point(Self::point_matrix(&selected))?;

        let width = cache.pooled.len();
        let mut g = Tensor2::zeros(rows.len(), width);
        for (j, &winner) in cache.argmax.iter().enumerate() {
            let r = rows.binary_search(&winner).expect("winner row selected");
            let cur = g.get(r, j);
            g.set(r, j, cur + grad_pooled[j]);
        }

        for (li, layer) in self.point_layers.iter().enumerate().rev() {
            let (input, pre, out) = &trace[li];
            let mut g_prev = Tensor2::zeros(rows.len(), layer.in_dim());
            let acc_layer = &mut acc.point_layers[li];
            for r in 0..rows.len() {
                for j in 0..layer.out_dim() {
                    let delta =
                        g.get(r, j) * layer.activation.derivative(pre.get(r, j), out.get(r, j));
                    if delta == 0.0 {
                        continue;
                    }
                    acc_layer.bias[j] += delta;
                    axpy(delta, input.row(r), acc_layer.weight.row_mut(j));
                    if li > 0 {
                        axpy(delta, layer.weight.row(j), g_prev.row_mut(r));
                    }
                }
            }
            g = g_prev;
        }
        Ok(())
    }
}

impl Params for PointEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.point_layers.visit(&join(prefix, "point"), f);
        self.post_layers.visit(&join(prefix, "post"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.point_layers.visit_mut(&join(prefix, "point"), f);
        self.post_layers.visit_mut(&join(prefix, "post"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = SplitMix64::new(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn permutation_invariant_bit_exact() {
        let mut rng = SplitMix64::new(1);
        let enc = PointEncoder::new(&[16, 8], 6, 32, &mut rng).unwrap();
        let pc = cloud(32, 2);
        let order: Vec<usize> = (0..32).rev().collect();
        assert_eq!(enc.encode(&pc).unwrap(), enc.encode(&pc.permuted(&order)).unwrap());
    }

    #[test]
    fn identical_points_pool_to_single_point_output() {
        let mut rng = SplitMix64::new(5);
        let enc = PointEncoder::new(&[8], 4, 5, &mut rng).unwrap();
        let p = [0.2, -0.4, 0.9];
        let pc = PointCloud::new(vec![p; 5]).unwrap();
        let (_, cache) = enc.forward(&pc).unwrap();
        let single = enc.point_layers[0].forward(&p).unwrap();
        assert_eq!(cache.pooled, single);
    }

    #[test]
    fn wrong_point_count_rejected() {
        let mut rng = SplitMix64::new(5);
        let enc = PointEncoder::new(&[8], 4, 5, &mut rng).unwrap();
        assert!(enc.encode(&cloud(4, 1)).is_err());
    }
}
