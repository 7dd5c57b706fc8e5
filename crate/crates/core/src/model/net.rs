//! The reference convolutional backbone with two 3-way heads.
//!
//! Layout: N blocks of [3×3 conv (same padding), ReLU, 2×2 max-pool], global
//! average pooling, a shared dense ReLU trunk, then a grade head and an
//! agreement head. Convolutions run as im2col + SGEMM on one thread, so
//! results are bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnShape {
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub trunk_units: usize,
}

impl CnnShape {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.trunk_units == 0 {
            return Err(Error::Config(format!("invalid network shape {self:?}")));
        }
        let stride = 1usize << self.widths.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {stride}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Param {
            name,
            shape,
            data: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnn {
    pub shape: CnnShape,
    /// conv weights/biases per block, then trunk, grade head, agreement head.
    pub params: Vec<Param>,
}

/// Raw logits of both heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLogits {
    pub grade: [f32; 3],
    pub agreement: [f32; 3],
}

struct BlockCache {
    cols: Vec<f32>,
    activated: Vec<f32>,
    argmax: Vec<u32>,
    side: usize,
}

/// Intermediate values kept from a forward pass for backpropagation.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    last_map: usize,
    pooled: Vec<f32>,
    trunk: Vec<f32>,
}

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], isize, isize),
    b: (&[f32], isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices sized for an m×k by k×n product into
    // a row-major m×n output; the strides index only within those slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f32], channels: usize, side: usize, cols: &mut [f32]) {
    let hw = side * side;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * side..(y + 1) * side];
                    if sy < 0 || sy >= side as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * side..(sy as usize + 1) * side];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..side - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..side - 1].copy_from_slice(&src[1..]);
                            out[side - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], channels: usize, side: usize, out: &mut [f32]) {
    let hw = side * side;
    out.fill(0.0);
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * side..(sy as usize + 1) * side];
                    let src = &row[y * side..(y + 1) * side];
                    match kx {
                        0 => dst[..side - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..side - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

fn max_pool(input: &[f32], channels: usize, side: usize) -> (Vec<f32>, Vec<u32>) {
    let half = side / 2;
    let mut out = vec![0f32; channels * half * half];
    let mut idx = vec![0u32; channels * half * half];
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + (2 * y) * side + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * side + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = c * half * half + y * half + x;
                out[o] = input[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

impl SmallCnn {
    fn layout(shape: &CnnShape) -> Vec<(String, Vec<usize>)> {
        let mut l = Vec::new();
        let mut cin = 3;
        for (k, &w) in shape.widths.iter().enumerate() {
            l.push((format!("conv{k}.weight"), vec![w, cin, 3, 3]));
            l.push((format!("conv{k}.bias"), vec![w]));
            cin = w;
        }
        l.push(("trunk.weight".into(), vec![shape.trunk_units, cin]));
        l.push(("trunk.bias".into(), vec![shape.trunk_units]));
        l.push(("grade_head.weight".into(), vec![3, shape.trunk_units]));
        l.push(("grade_head.bias".into(), vec![3]));
        l.push(("agreement_head.weight".into(), vec![3, shape.trunk_units]));
        l.push(("agreement_head.bias".into(), vec![3]));
        l
    }

    /// All weights and biases zero.
    pub fn zeros(shape: CnnShape) -> Result<Self> {
        shape.validate()?;
        let params = Self::layout(&shape)
            .into_iter()
            .map(|(n, s)| Param::zeros(n, s))
            .collect();
        Ok(SmallCnn { shape, params })
    }

    /// He-normal initialization for ReLU layers, Glorot-scaled heads, zero biases.
    pub fn init(shape: CnnShape, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut net.params {
            if !p.name.ends_with(".weight") {
                continue;
            }
            let fan_in: usize = p.shape[1..].iter().product();
            let std = if p.name.contains("head") {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut p.data {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from named tensors, checking every shape.
    pub fn from_params(shape: CnnShape, params: Vec<Param>) -> Result<Self> {
        shape.validate()?;
        let layout = Self::layout(&shape);
        if layout.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} tensors", layout.len()),
                got: format!("{} tensors", params.len()),
            });
        }
        for ((name, dims), p) in layout.iter().zip(&params) {
            let len: usize = p.shape.iter().product();
            if *name != p.name || *dims != p.shape || len != p.data.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {dims:?}"),
                    got: format!("{} {:?} ({} values)", p.name, p.shape, p.data.len()),
                });
            }
        }
        Ok(SmallCnn { shape, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    fn input_len(&self) -> usize {
        3 * self.shape.input_size * self.shape.input_size
    }

    fn check_input(&self, input: &[f32]) -> Result<()> {
        if input.len() != self.input_len() {
            let side = ((input.len() / 3) as f64).sqrt();
            return Err(Error::ShapeMismatch {
                expected: format!("3x{0}x{0} input", self.shape.input_size),
                got: format!("{} values (~3x{side:.0}x{side:.0})", input.len()),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    fn dense(w: &[f32], b: &[f32], x: &[f32], out_units: usize) -> Vec<f32> {
        let mut y = b.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * x.len()..(o + 1) * x.len()];
            *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
        }
        debug_assert_eq!(y.len(), out_units);
        y
    }

    fn run(&self, input: &[f32], keep: bool) -> Result<(HeadLogits, Option<ForwardCache>)> {
        self.check_input(input)?;
        let nblocks = self.shape.widths.len();
        let mut x = input.to_vec();
        let mut side = self.shape.input_size;
        let mut cin = 3;
        let mut blocks = Vec::new();
        for k in 0..nblocks {
            let cout = self.shape.widths[k];
            let hw = side * side;
            let mut cols = vec![0f32; cin * 9 * hw];
            im2col(&x, cin, side, &mut cols);
            let w = &self.params[2 * k].data;
            let b = &self.params[2 * k + 1].data;
            let mut z = vec![0f32; cout * hw];
            for (o, bias) in b.iter().enumerate() {
                z[o * hw..(o + 1) * hw].fill(*bias);
            }
            sgemm(
                cout,
                cin * 9,
                hw,
                (w, (cin * 9) as isize, 1),
                (&cols, hw as isize, 1),
                1.0,
                &mut z,
            );
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            let (pooled, argmax) = max_pool(&z, cout, side);
            if keep {
                blocks.push(BlockCache {
                    cols,
                    activated: z,
                    argmax,
                    side,
                });
            }
            x = pooled;
            side /= 2;
            cin = cout;
        }
        let map = side * side;
        let gap: Vec<f32> = (0..cin)
            .map(|c| x[c * map..(c + 1) * map].iter().sum::<f32>() / map as f32)
            .collect();
        let p = &self.params;
        let t = 2 * nblocks;
        let mut trunk = Self::dense(&p[t].data, &p[t + 1].data, &gap, self.shape.trunk_units);
        trunk.iter_mut().for_each(|v| *v = v.max(0.0));
        let g = Self::dense(&p[t + 2].data, &p[t + 3].data, &trunk, 3);
        let a = Self::dense(&p[t + 4].data, &p[t + 5].data, &trunk, 3);
        let logits = HeadLogits {
            grade: [g[0], g[1], g[2]],
            agreement: [a[0], a[1], a[2]],
        };
        if logits.grade.iter().chain(&logits.agreement).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        let cache = keep.then_some(ForwardCache {
            blocks,
            last_map: map,
            pooled: gap,
            trunk,
        });
        Ok((logits, cache))
    }

    /// Forward pass on a CHW input.
    pub fn forward(&self, input: &[f32]) -> Result<HeadLogits> {
        Ok(self.run(input, false)?.0)
    }

    pub fn forward_train(&self, input: &[f32]) -> Result<(HeadLogits, ForwardCache)> {
        let (logits, cache) = self.run(input, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Accumulates `scale ×` the parameter gradients for the given output
    /// gradients into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_grade: [f32; 3],
        d_agreement: [f32; 3],
        scale: f32,
        grads: &mut [Vec<f32>],
    ) {
        let nblocks = self.shape.widths.len();
        let t = 2 * nblocks;
        let units = self.shape.trunk_units;
        let p = &self.params;

        let mut d_trunk = vec![0f32; units];
        for (head, d) in [(t + 2, d_grade), (t + 4, d_agreement)] {
            let w = &p[head].data;
            for o in 0..3 {
                let g = d[o] * scale;
                grads[head + 1][o] += g;
                let row = &w[o * units..(o + 1) * units];
                let grow = &mut grads[head][o * units..(o + 1) * units];
                for u in 0..units {
                    grow[u] += g * cache.trunk[u];
                    d_trunk[u] += g * row[u];
                }
            }
        }
        for (u, dt) in d_trunk.iter_mut().enumerate() {
            if cache.trunk[u] <= 0.0 {
                *dt = 0.0;
            }
        }
        let feat = cache.pooled.len();
        let mut d_gap = vec![0f32; feat];
        {
            let w = &p[t].data;
            for u in 0..units {
                let g = d_trunk[u];
                if g == 0.0 {
                    continue;
                }
                grads[t + 1][u] += g;
                let row = &w[u * feat..(u + 1) * feat];
                let grow = &mut grads[t][u * feat..(u + 1) * feat];
                for f in 0..feat {
                    grow[f] += g * cache.pooled[f];
                    d_gap[f] += g * row[f];
                }
            }
        }
        // Average pooling spreads the gradient evenly over the last map.
        let map = cache.last_map;
        let mut d_x: Vec<f32> = d_gap
            .iter()
            .flat_map(|g| std::iter::repeat_n(g / map as f32, map))
            .collect();

        for k in (0..nblocks).rev() {
            let bc = &cache.blocks[k];
            let cout = self.shape.widths[k];
            let cin = if k == 0 { 3 } else { self.shape.widths[k - 1] };
            let hw = bc.side * bc.side;
            let mut dz = vec![0f32; cout * hw];
            for (o, &i) in bc.argmax.iter().enumerate() {
                if bc.activated[i as usize] > 0.0 {
                    dz[i as usize] += d_x[o];
                }
            }
            for o in 0..cout {
                grads[2 * k + 1][o] += dz[o * hw..(o + 1) * hw].iter().sum::<f32>();
            }
            // dW += dz · colsᵀ
            sgemm(
                cout,
                hw,
                cin * 9,
                (&dz, hw as isize, 1),
                (&bc.cols, 1, hw as isize),
                1.0,
                &mut grads[2 * k],
            );
            if k > 0 {
                let mut d_cols = vec![0f32; cin * 9 * hw];
                // d_cols = Wᵀ · dz
                sgemm(
                    cin * 9,
                    cout,
                    hw,
                    (&p[2 * k].data, 1, (cin * 9) as isize),
                    (&dz, hw as isize, 1),
                    0.0,
                    &mut d_cols,
                );
                let mut d_in = vec![0f32; cin * hw];
                col2im(&d_cols, cin, bc.side, &mut d_in);
                d_x = d_in;
            }
        }
    }
}
