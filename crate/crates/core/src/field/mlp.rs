//! Small fully connected radiance field with positional encoding.
//!
//! A trunk network maps `γ(p)` to `[raw density, features…]`; a color network
//! maps `[features, γ(d)]` to RGB. Derivatives come from a forward-mode pass
//! that carries the Jacobian with respect to `(p, d)` through every layer.

use super::{sigmoid, softplus, Aabb, FieldDerivatives, FieldError, FieldSample, RadianceField};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const MLP_MAGIC: &[u8; 4] = b"NRFW";
pub const MLP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Activation {
    Identity = 0,
    Relu = 1,
    Softplus = 2,
    Sigmoid = 3,
}

impl Activation {
    pub fn from_tag(tag: u8) -> Result<Self, FieldError> {
        match tag {
            0 => Ok(Self::Identity),
            1 => Ok(Self::Relu),
            2 => Ok(Self::Softplus),
            3 => Ok(Self::Sigmoid),
            t => Err(FieldError::UnsupportedActivation(t)),
        }
    }

    fn apply(self, x: f64) -> (f64, f64) {
        match self {
            Self::Identity => (x, 1.0),
            Self::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Self::Softplus => (softplus(x), sigmoid(x)),
            Self::Sigmoid => {
                let s = sigmoid(x);
                (s, s * (1.0 - s))
            }
        }
    }
}

/// Dense layer `y = act(W x + b)`; parameters are held at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self, FieldError> {
        if weights.nrows() != bias.len() || weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(FieldError::MalformedWeights(format!(
                "layer {}x{} with {} biases",
                weights.nrows(),
                weights.ncols(),
                bias.len()
            )));
        }
        Ok(Self {
            weights: weights.map(|w| w as f32 as f64),
            bias: bias.map(|b| b as f32 as f64),
            activation,
        })
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    /// Forward pass; `jac` is `∂x/∂(inputs)` and is updated in place.
    fn forward(&self, x: &DVector<f64>, jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let z = &self.weights * x + &self.bias;
        let mut out = DVector::zeros(z.len());
        let mut slope = DVector::zeros(z.len());
        for i in 0..z.len() {
            let (a, da) = self.activation.apply(z[i]);
            out[i] = a;
            slope[i] = da;
        }
        if let Some(j) = jac {
            let mut jz = &self.weights * &*j;
            for (i, mut row) in jz.row_iter_mut().enumerate() {
                row *= slope[i];
            }
            *j = jz;
        }
        out
    }
}

/// `γ(x) = [x, sin(2ᵏπx), cos(2ᵏπx) for k < L]` with its Jacobian.
pub fn positional_encoding(x: &Vector3<f64>, order: usize) -> (DVector<f64>, DMatrix<f64>) {
    let dim = 3 + 6 * order;
    let mut v = DVector::zeros(dim);
    let mut j = DMatrix::zeros(dim, 3);
    for i in 0..3 {
        v[i] = x[i];
        j[(i, i)] = 1.0;
    }
    for k in 0..order {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        for i in 0..3 {
            let (s, c) = (w * x[i]).sin_cos();
            let base = 3 + 6 * k;
            v[base + i] = s;
            v[base + 3 + i] = c;
            j[(base + i, i)] = w * c;
            j[(base + 3 + i, i)] = -w * s;
        }
    }
    (v, j)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    pub position_order: usize,
    pub direction_order: usize,
    pub density_activation: Activation,
    pub bounds: Aabb,
    pub trunk: Vec<DenseLayer>,
    pub color_net: Vec<DenseLayer>,
}

fn chain_shapes(layers: &[DenseLayer], input: usize, what: &str) -> Result<usize, FieldError> {
    if layers.is_empty() {
        return Err(FieldError::MalformedWeights(format!("{what} network has no layers")));
    }
    let mut width = input;
    for (i, l) in layers.iter().enumerate() {
        if l.cols() != width {
            return Err(FieldError::MalformedWeights(format!(
                "{what} layer {i} expects {} inputs, previous layer gives {width}",
                l.cols()
            )));
        }
        width = l.rows();
    }
    Ok(width)
}

impl MlpField {
    pub fn new(
        position_order: usize,
        direction_order: usize,
        density_activation: Activation,
        bounds: Aabb,
        trunk: Vec<DenseLayer>,
        color_net: Vec<DenseLayer>,
    ) -> Result<Self, FieldError> {
        if !matches!(density_activation, Activation::Relu | Activation::Softplus) {
            return Err(FieldError::UnsupportedActivation(density_activation as u8));
        }
        let trunk_out = chain_shapes(&trunk, 3 + 6 * position_order, "trunk")?;
        let color_in = trunk_out - 1 + 3 + 6 * direction_order;
        let color_out = chain_shapes(&color_net, color_in, "color")?;
        if color_out != 3 {
            return Err(FieldError::MalformedWeights(format!(
                "color network outputs {color_out} values, expected 3"
            )));
        }
        Ok(Self {
            position_order,
            direction_order,
            density_activation,
            bounds,
            trunk,
            color_net,
        })
    }

    /// Randomly initialized network (uniform ±√(6/fan_in)), for tests and benches.
    pub fn random(seed: u64, hidden: usize, depth: usize, bounds: Aabb) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize, act: Activation| {
            let s = (6.0 / cols as f64).sqrt();
            let w = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s));
            let b = DVector::from_fn(rows, |_, _| rng.random_range(-0.1..0.1));
            DenseLayer::new(w, b, act).expect("consistent shapes")
        };
        let (lp, ld) = (6, 4);
        let mut trunk = Vec::new();
        let mut width = 3 + 6 * lp;
        for _ in 0..depth.saturating_sub(1) {
            trunk.push(layer(hidden, width, Activation::Relu));
            width = hidden;
        }
        trunk.push(layer(hidden + 1, width, Activation::Identity));
        let color_net = vec![
            layer(hidden / 2, hidden + 3 + 6 * ld, Activation::Relu),
            layer(3, hidden / 2, Activation::Sigmoid),
        ];
        Self::new(lp, ld, Activation::Softplus, bounds, trunk, color_net).expect("consistent shapes")
    }

    fn trunk_forward(&self, p: &Vector3<f64>, jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let (mut x, j0) = positional_encoding(p, self.position_order);
        match jac {
            Some(j) => {
                *j = j0;
                for l in &self.trunk {
                    x = l.forward(&x, Some(j));
                }
            }
            None => {
                for l in &self.trunk {
                    x = l.forward(&x, None);
                }
            }
        }
        x
    }

    fn density_from_raw(&self, raw: f64) -> (f64, f64) {
        self.density_activation.apply(raw)
    }

    /// Plain forward pass: (rgb, density). Inputs outside the bounds give zero density.
    pub fn eval(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> (Vector3<f64>, f64) {
        let s = self.sample(p, d);
        (s.color, s.density)
    }

    fn color_input(&self, trunk_out: &DVector<f64>, d: &Vector3<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let nf = trunk_out.len() - 1;
        let (enc, jd) = positional_encoding(d, self.direction_order);
        let mut x = DVector::zeros(nf + enc.len());
        x.rows_mut(0, nf).copy_from(&trunk_out.rows(1, nf));
        x.rows_mut(nf, enc.len()).copy_from(&enc);
        (x, jd)
    }

    // ---- binary format ----

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MLP_MAGIC);
        out.extend_from_slice(&MLP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.position_order as u32).to_le_bytes());
        out.extend_from_slice(&(self.direction_order as u32).to_le_bytes());
        out.push(self.density_activation as u8);
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for net in [&self.trunk, &self.color_net] {
            out.extend_from_slice(&(net.len() as u32).to_le_bytes());
            for l in net {
                out.extend_from_slice(&(l.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(l.cols() as u32).to_le_bytes());
                out.push(l.activation as u8);
                for r in 0..l.rows() {
                    for c in 0..l.cols() {
                        out.extend_from_slice(&(l.weights[(r, c)] as f32).to_le_bytes());
                    }
                }
                for b in l.bias.iter() {
                    out.extend_from_slice(&(*b as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MLP_MAGIC {
            return Err(FieldError::MalformedWeights("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MLP_VERSION {
            return Err(FieldError::MalformedWeights(format!("unsupported version {version}")));
        }
        let position_order = r.u32()? as usize;
        let direction_order = r.u32()? as usize;
        let density_activation = Activation::from_tag(r.u8()?)?;
        let mut b = [0.0; 6];
        for v in b.iter_mut() {
            *v = r.f32()? as f64;
        }
        let bounds = Aabb::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]));
        let trunk = r.layers()?;
        let color_net = r.layers()?;
        if r.pos != bytes.len() {
            return Err(FieldError::MalformedWeights(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Self::new(position_order, direction_order, density_activation, bounds, trunk, color_net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FieldError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FieldError::MalformedWeights(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FieldError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, FieldError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn layers(&mut self) -> Result<Vec<DenseLayer>, FieldError> {
        let n = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let act = Activation::from_tag(self.u8()?)?;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.saturating_mul(4) <= self.bytes.len())
                .ok_or_else(|| FieldError::MalformedWeights(format!("layer {rows}x{cols} exceeds file size")))?;
            let mut w = Vec::with_capacity(count);
            for _ in 0..count {
                w.push(self.f32()? as f64);
            }
            let mut b = Vec::with_capacity(rows);
            for _ in 0..rows {
                b.push(self.f32()? as f64);
            }
            out.push(DenseLayer::new(
                DMatrix::from_row_slice(rows, cols, &w),
                DVector::from_vec(b),
                act,
            )?);
        }
        Ok(out)
    }
}

impl RadianceField for MlpField {
    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn density(&self, p: &Vector3<f64>) -> f64 {
        if !self.bounds.contains(p) {
            return 0.0;
        }
        self.density_from_raw(self.trunk_forward(p, None)[0]).0
    }

    fn sample(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldSample {
        let t = self.trunk_forward(p, None);
        let density = if self.bounds.contains(p) {
            self.density_from_raw(t[0]).0
        } else {
            0.0
        };
        let (mut x, _) = self.color_input(&t, d);
        for l in &self.color_net {
            x = l.forward(&x, None);
        }
        FieldSample {
            density,
            color: Vector3::new(x[0], x[1], x[2]).map(|c| c.clamp(0.0, 1.0)),
        }
    }

    fn sample_with_derivatives(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldDerivatives {
        let mut jt = DMatrix::zeros(0, 0);
        let t = self.trunk_forward(p, Some(&mut jt));
        let inside = self.bounds.contains(p);
        let (rho, drho) = self.density_from_raw(t[0]);
        let (x0, jd) = self.color_input(&t, d);
        // Jacobian of the color input w.r.t. (p, d): features depend on p, γ(d) on d.
        let nf = t.len() - 1;
        let mut jx = DMatrix::zeros(x0.len(), 6);
        jx.view_mut((0, 0), (nf, 3)).copy_from(&jt.rows(1, nf));
        jx.view_mut((nf, 3), (jd.nrows(), 3)).copy_from(&jd);
        let mut x = x0;
        for l in &self.color_net {
            x = l.forward(&x, Some(&mut jx));
        }
        let mut color = Vector3::zeros();
        let mut jp = Matrix3::zeros();
        let mut jdir = Matrix3::zeros();
        for c in 0..3 {
            color[c] = x[c].clamp(0.0, 1.0);
            if x[c] == color[c] {
                for k in 0..3 {
                    jp[(c, k)] = jx[(c, k)];
                    jdir[(c, k)] = jx[(c, 3 + k)];
                }
            }
        }
        let grad = Vector3::new(jt[(0, 0)], jt[(0, 1)], jt[(0, 2)]) * drho;
        FieldDerivatives {
            density: if inside { rho } else { 0.0 },
            density_grad: if inside { grad } else { Vector3::zeros() },
            color,
            color_pos_jac: jp,
            color_dir_jac: jdir,
        }
    }
}
