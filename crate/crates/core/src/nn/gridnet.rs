//! Grid-structured encoder/decoder predicting per-preset blending weights.
//!
//! Nodes sit on a `rows x columns` grid; row `r` carries `stem * 2^r`
//! channels at `1 / 2^r` resolution. Lateral residual units connect
//! neighbouring columns, downsampling units link rows in the first half of
//! the columns and upsampling units in the second half. Every node is the
//! sum of its incoming units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, Conv};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridNetConfig {
    pub columns: usize,
    pub rows: usize,
    pub stem_channels: usize,
    /// Number of presets; the input has `3 k` channels.
    pub k: usize,
}

impl GridNetConfig {
    pub fn new(k: usize) -> Self {
        GridNetConfig { columns: 6, rows: 4, stem_channels: 8, k }
    }

    /// Small network used for finite-difference gradient checks.
    pub fn tiny(k: usize) -> Self {
        GridNetConfig { columns: 2, rows: 2, stem_channels: 4, k }
    }

    pub fn input_channels(&self) -> usize {
        3 * self.k
    }

    pub fn row_channels(&self, r: usize) -> usize {
        self.stem_channels << r
    }

    /// Spatial dimensions must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << (self.rows - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns < 2 || self.columns % 2 != 0 {
            return Err(Error::Parameter(format!("grid columns must be even and >= 2, got {}", self.columns)));
        }
        if self.rows < 1 || self.rows > 8 {
            return Err(Error::Parameter(format!("grid rows must be in 1..=8, got {}", self.rows)));
        }
        if self.stem_channels == 0 || self.k < 2 {
            return Err(Error::Parameter(format!(
                "need stem channels > 0 and k >= 2, got {} and {}",
                self.stem_channels, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Act,
    Conv(usize),
    Up2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skip {
    None,
    Identity,
    Project(usize),
}

#[derive(Clone, Debug)]
pub struct Unit {
    pub name: String,
    pub src: usize,
    pub dst: usize,
    pub ops: Vec<Op>,
    pub skip: Skip,
}

/// A named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Network topology and parameter layout, independent of parameter values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: GridNetConfig,
    pub convs: Vec<Conv>,
    /// Convolutions initialized to zero so the initial output is uniform.
    zero_init: Vec<bool>,
    pub units: Vec<Unit>,
    pub entries: Vec<ParamEntry>,
    pub num_params: usize,
    pub num_nodes: usize,
}

struct Builder {
    convs: Vec<Conv>,
    zero_init: Vec<bool>,
    entries: Vec<ParamEntry>,
    next: usize,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> usize {
        let weight = self.next;
        let wlen = cout * cin * k * k;
        self.entries.push(ParamEntry {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            offset: weight,
            len: wlen,
        });
        let bias = weight + wlen;
        self.entries.push(ParamEntry { name: format!("{name}.bias"), shape: vec![cout], offset: bias, len: cout });
        self.next = bias + cout;
        self.convs.push(Conv { cin, cout, k, stride, weight, bias });
        self.zero_init.push(zero);
        self.convs.len() - 1
    }
}

impl Architecture {
    pub fn new(config: GridNetConfig) -> Result<Self> {
        config.validate()?;
        let (rows, cols) = (config.rows, config.columns);
        let node = |r: usize, c: usize| 1 + r * cols + c;
        let output = 1 + rows * cols;
        let mut b = Builder { convs: Vec::new(), zero_init: Vec::new(), entries: Vec::new(), next: 0 };
        let mut units = Vec::new();
        let cin = config.input_channels();
        let s = config.stem_channels;

        let c0 = b.conv("stem.conv0", cin, s, 3, 1, false);
        let c1 = b.conv("stem.conv1", s, s, 3, 1, false);
        let p = b.conv("stem.proj", cin, s, 1, 1, false);
        units.push(Unit {
            name: "stem".into(),
            src: 0,
            dst: node(0, 0),
            ops: vec![Op::Conv(c0), Op::Act, Op::Conv(c1)],
            skip: Skip::Project(p),
        });

        let lateral = |b: &mut Builder, r: usize, c: usize| {
            let ch = config.row_channels(r);
            let name = format!("lateral.r{r}.c{c}");
            let mut ops = Vec::new();
            for i in 0..3 {
                ops.push(Op::Act);
                ops.push(Op::Conv(b.conv(&format!("{name}.conv{i}"), ch, ch, 3, 1, false)));
            }
            Unit { name, src: node(r, c), dst: node(r, c + 1), ops, skip: Skip::Identity }
        };
        for c in 0..cols {
            if c < cols / 2 {
                for r in 0..rows {
                    if c > 0 {
                        units.push(lateral(&mut b, r, c - 1));
                    }
                    if r > 0 {
                        let (lo, hi) = (config.row_channels(r - 1), config.row_channels(r));
                        let name = format!("down.r{}.c{c}", r - 1);
                        let a = b.conv(&format!("{name}.conv0"), lo, hi, 3, 2, false);
                        let d = b.conv(&format!("{name}.conv1"), hi, hi, 3, 1, false);
                        units.push(Unit {
                            name,
                            src: node(r - 1, c),
                            dst: node(r, c),
                            ops: vec![Op::Act, Op::Conv(a), Op::Act, Op::Conv(d)],
                            skip: Skip::None,
                        });
                    }
                }
            } else {
                for r in (0..rows).rev() {
                    units.push(lateral(&mut b, r, c - 1));
                    if r + 1 < rows {
                        let (lo, hi) = (config.row_channels(r), config.row_channels(r + 1));
                        let name = format!("up.r{}.c{c}", r + 1);
                        let a = b.conv(&format!("{name}.conv0"), hi, lo, 3, 1, false);
                        let d = b.conv(&format!("{name}.conv1"), lo, lo, 3, 1, false);
                        units.push(Unit {
                            name,
                            src: node(r + 1, c),
                            dst: node(r, c),
                            ops: vec![Op::Up2, Op::Act, Op::Conv(a), Op::Act, Op::Conv(d)],
                            skip: Skip::None,
                        });
                    }
                }
            }
        }

        let h0 = b.conv("head.conv0", s, s, 3, 1, false);
        let h1 = b.conv("head.conv1", s, config.k, 3, 1, true);
        let hp = b.conv("head.proj", s, config.k, 1, 1, true);
        units.push(Unit {
            name: "head".into(),
            src: node(0, cols - 1),
            dst: output,
            ops: vec![Op::Act, Op::Conv(h0), Op::Act, Op::Conv(h1)],
            skip: Skip::Project(hp),
        });

        Ok(Architecture {
            config,
            convs: b.convs,
            zero_init: b.zero_init,
            units,
            entries: b.entries,
            num_params: b.next,
            num_nodes: output + 1,
        })
    }

    /// Fan-in scaled uniform initialization; the head's output layers are
    /// zero so the initial weights are exactly uniform.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); self.num_params];
        for (conv, &zero) in self.convs.iter().zip(&self.zero_init) {
            if zero {
                continue;
            }
            let bound = 1.0 / ((conv.cin * conv.k * conv.k) as f64).sqrt();
            for v in &mut params[conv.weight..conv.weight + conv.weight_len()] {
                *v = T::of(rng.gen_range(-bound..bound));
            }
            for v in &mut params[conv.bias..conv.bias + conv.cout] {
                *v = T::of(rng.gen_range(-bound..bound));
            }
        }
        params
    }

    fn output_node(&self) -> usize {
        self.num_nodes - 1
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.stride();
        if x.c != self.config.input_channels() {
            return Err(Error::Dimensions(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels(),
                x.c
            )));
        }
        if x.h == 0 || x.w == 0 || x.h % s != 0 || x.w % s != 0 {
            return Err(Error::Dimensions(format!("network input {}x{} is not a positive multiple of {s}", x.w, x.h)));
        }
        Ok(())
    }

    fn run_unit<T: Scalar>(
        &self,
        unit: &Unit,
        params: &[T],
        x: &Tensor<T>,
        mut cache: Option<&mut Vec<Tensor<T>>>,
    ) -> Tensor<T> {
        let mut cur: Option<Tensor<T>> = None;
        for (i, op) in unit.ops.iter().enumerate() {
            let input = cur.as_ref().unwrap_or(x);
            let next = match *op {
                Op::Act => ops::leaky_relu(input),
                Op::Conv(c) => self.convs[c].forward(params, input),
                Op::Up2 => ops::upsample2(input),
            };
            if let Some(c) = cache.as_deref_mut() {
                // The first op reads the source node, which the caller keeps.
                if i > 0 {
                    c.push(cur.take().expect("op input"));
                }
            }
            cur = Some(next);
        }
        let mut y = cur.expect("unit has ops");
        match unit.skip {
            Skip::None => {}
            Skip::Identity => y.add_assign(x),
            Skip::Project(c) => y.add_assign(&self.convs[c].forward(params, x)),
        }
        y
    }

    /// Logits `[k, h, w]`.
    pub fn logits<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_impl(params, x, false)?.0)
    }

    /// Softmax-normalized weight maps `[k, h, w]`.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::softmax_channels(&self.logits(params, x)?))
    }

    fn forward_impl<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<Trace<T>>)> {
        self.check_input(x)?;
        if params.len() != self.num_params {
            return Err(Error::Dimensions(format!("expected {} parameters, got {}", self.num_params, params.len())));
        }
        let mut nodes: Vec<Option<Tensor<T>>> = vec![None; self.num_nodes];
        nodes[0] = Some(x.clone());
        let mut op_inputs = Vec::with_capacity(if record { self.units.len() } else { 0 });
        for unit in &self.units {
            let src = nodes[unit.src].as_ref().expect("source node evaluated");
            let mut cache = Vec::new();
            let y = self.run_unit(unit, params, src, record.then_some(&mut cache));
            if record {
                op_inputs.push(cache);
            }
            match &mut nodes[unit.dst] {
                Some(acc) => acc.add_assign(&y),
                slot @ None => *slot = Some(y),
            }
            if !record {
                self.release_consumed(&mut nodes, unit);
            }
        }
        let out = nodes[self.output_node()].take().expect("output node");
        let trace = record.then(|| Trace { nodes, op_inputs });
        Ok((out, trace))
    }

    /// Drops node tensors that no later unit reads.
    fn release_consumed<T>(&self, nodes: &mut [Option<Tensor<T>>], done: &Unit) {
        let idx = self.units.iter().position(|u| std::ptr::eq(u, done)).unwrap_or(0);
        if !self.units[idx + 1..].iter().any(|u| u.src == done.src) {
            nodes[done.src] = None;
        }
    }

    /// Forward pass keeping the intermediate tensors needed by
    /// [`Architecture::backward`].
    pub fn forward_trace<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let (logits, trace) = self.forward_impl(params, x, true)?;
        Ok((logits, trace.expect("trace recorded")))
    }

    /// Backpropagates `dlogits`, accumulating into `grads`.
    pub fn backward<T: Scalar>(&self, params: &[T], trace: &Trace<T>, dlogits: &Tensor<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.num_params, "gradient buffer size");
        let mut dnodes: Vec<Option<Tensor<T>>> = vec![None; self.num_nodes];
        dnodes[self.output_node()] = Some(dlogits.clone());
        for (ui, unit) in self.units.iter().enumerate().rev() {
            let Some(dy) = dnodes[unit.dst].clone() else { continue };
            let need_dx = unit.src != 0;
            let x = trace.nodes[unit.src].as_ref().expect("traced node");
            let cache = &trace.op_inputs[ui];
            let mut g = dy.clone();
            for (i, op) in unit.ops.iter().enumerate().rev() {
                let input = if i == 0 { x } else { &cache[i - 1] };
                let first = i == 0;
                g = match *op {
                    Op::Act => ops::leaky_relu_backward(input, &g),
                    Op::Conv(c) => match self.convs[c].backward(params, input, &g, grads, need_dx || !first) {
                        Some(d) => d,
                        None => break,
                    },
                    Op::Up2 => ops::upsample2_backward(&g),
                };
            }
            let mut dx = if need_dx { Some(g) } else { None };
            match unit.skip {
                Skip::None => {}
                Skip::Identity => {
                    if let Some(d) = dx.as_mut() {
                        d.add_assign(&dy);
                    }
                }
                Skip::Project(c) => {
                    if let Some(ds) = self.convs[c].backward(params, x, &dy, grads, need_dx) {
                        if let Some(d) = dx.as_mut() {
                            d.add_assign(&ds);
                        }
                    }
                }
            }
            if let Some(d) = dx {
                match &mut dnodes[unit.src] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
    }
}

/// Intermediate tensors of one forward pass.
pub struct Trace<T> {
    nodes: Vec<Option<Tensor<T>>>,
    op_inputs: Vec<Vec<Tensor<T>>>,
}

/// Learnable scalar count for `config`.
pub fn parameter_count(config: &GridNetConfig) -> Result<usize> {
    Ok(Architecture::new(*config)?.num_params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_parameter_counts() {
        let k3 = parameter_count(&GridNetConfig::new(3)).unwrap();
        let k5 = parameter_count(&GridNetConfig::new(5)).unwrap();
        assert_eq!(k3, 1_065_950);
        assert_eq!(k5, 1_066_594);
        let mut wide = GridNetConfig::new(3);
        wide.stem_channels = 16;
        assert!(parameter_count(&wide).unwrap() > k3);
    }

    #[test]
    fn zero_head_gives_uniform_weights() {
        let arch = Architecture::new(GridNetConfig::tiny(3)).unwrap();
        let params: Vec<f32> = arch.init_params(1);
        let x = Tensor::from_vec(9, 8, 8, (0..576).map(|i| (i % 17) as f32 / 17.0).collect());
        let w = arch.forward(&params, &x).unwrap();
        assert_eq!(w.shape(), (3, 8, 8));
        assert!(w.data.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn rejects_bad_shapes() {
        let arch = Architecture::new(GridNetConfig::new(3)).unwrap();
        let params: Vec<f32> = arch.init_params(1);
        assert!(arch.forward(&params, &Tensor::zeros(9, 12, 16)).is_err());
        assert!(arch.forward(&params, &Tensor::zeros(6, 16, 16)).is_err());
        assert!(Architecture::new(GridNetConfig { columns: 3, ..GridNetConfig::new(3) }).is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_contiguous() {
        let arch = Architecture::new(GridNetConfig::new(5)).unwrap();
        let mut next = 0;
        let mut names = std::collections::HashSet::new();
        for e in &arch.entries {
            assert_eq!(e.offset, next);
            assert_eq!(e.len, e.shape.iter().product::<usize>());
            assert!(names.insert(e.name.clone()));
            next += e.len;
        }
        assert_eq!(next, arch.num_params);
    }
}
