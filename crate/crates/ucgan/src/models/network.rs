use std::collections::BTreeMap;
use std::path::Path;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelError, BN_EPS, BN_MOMENTUM};
use crate::autodiff::{
    catalog, load_checkpoint, save_checkpoint, AdamOptimizer, AutodiffError, Gradients, Scalar,
    Tape, Tensor, ValueId,
};
use crate::latent::PAIR_EPS;

/// One step of a network's layer list. Parameter-bearing layers carry a
/// local name; the full registry key is `"{net}/{layer}/{leaf}"`.
#[derive(Debug, Clone)]
pub enum Layer {
    /// 3x3 stride-1 pad-1 convolution, optional per-channel normalization,
    /// optional ELU.
    Conv3x3 {
        name: String,
        in_c: usize,
        out_c: usize,
        bn: bool,
        act: bool,
    },
    Dense {
        name: String,
        in_w: usize,
        out_w: usize,
        act: bool,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Upsample2,
    /// Per-sample reshape; the batch dimension is preserved.
    Reshape {
        shape: Vec<usize>,
    },
    Flatten,
    NormalizePairs,
    Squash01,
    /// Broadcast the conditioning vector over the current spatial grid and
    /// append it as extra channels.
    ConcatAttr {
        width: usize,
    },
    Dropout {
        rate: f64,
    },
}

impl Layer {
    /// Catalog operator ids this layer lowers to.
    pub fn op_ids(&self) -> Vec<&'static str> {
        match self {
            Layer::Conv3x3 { bn, act, .. } => {
                let mut v = vec!["conv2d", "add_channel_bias"];
                if *bn {
                    v.push("batch_norm");
                }
                if *act {
                    v.push("elu");
                }
                v
            }
            Layer::Dense { act, .. } => {
                let mut v = vec!["matmul", "add_row_bias"];
                if *act {
                    v.push("elu");
                }
                v
            }
            Layer::AvgPool { .. } | Layer::GlobalAvgPool => vec!["avg_pool"],
            Layer::Upsample2 => vec!["upsample_nearest"],
            Layer::Reshape { .. } | Layer::Flatten => vec!["reshape"],
            Layer::NormalizePairs => vec!["normalize_pairs"],
            Layer::Squash01 => vec!["squash01"],
            Layer::ConcatAttr { .. } => vec!["broadcast_spatial", "concat"],
            Layer::Dropout { .. } => vec!["mul"],
        }
    }
}

/// Structured kernels that are smooth but live outside the string-dispatch
/// catalog; `assert_smooth_ops` accepts these alongside catalog entries.
const COMPOSITE_OPS: &[&str] = &[
    "add_channel_bias",
    "add_row_bias",
    "batch_norm",
    "batch_norm_affine",
    "normalize_pairs",
    "squash01",
    "broadcast_spatial",
];

const FORBIDDEN_OPS: &[&str] = &["max_pool", "conv2d_strided", "conv_transpose", "deconv"];

#[derive(Debug, Clone)]
pub struct Head {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct Running<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// A batch-statistics observation to fold into running statistics.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Leaf ids of one network's parameters on a particular tape.
pub struct TapeBinding {
    ids: BTreeMap<String, ValueId>,
    trainable: bool,
}

impl TapeBinding {
    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn id(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name} in binding"))
    }
}

/// Per-forward switches.
pub struct ForwardOpts<'a> {
    /// Batch statistics + dropout when set; running statistics otherwise.
    pub train: bool,
    /// Noise source for dropout masks; required in train mode only when the
    /// network has dropout layers.
    pub rng: Option<&'a mut dyn RngCore>,
    /// Conditioning vector `[n, attr_width]` for networks with a
    /// `ConcatAttr` splice point.
    pub attrs: Option<ValueId>,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        ForwardOpts {
            train: false,
            rng: None,
            attrs: None,
        }
    }

    pub fn train() -> Self {
        ForwardOpts {
            train: true,
            rng: None,
            attrs: None,
        }
    }
}

/// An ordered layer list plus its named parameters and running statistics.
pub struct Network<T: Scalar> {
    name: String,
    trunk: Vec<Layer>,
    heads: Vec<Head>,
    params: BTreeMap<String, Tensor<T>>,
    running: BTreeMap<String, Running<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

fn pname(net: &str, layer: &str, leaf: &str) -> String {
    format!("{net}/{layer}/{leaf}")
}

impl<T: Scalar> Network<T> {
    /// Walks the layer lists, creates every parameter with seeded He/zero
    /// initialization, and audits the operator set.
    pub fn assemble(
        name: &str,
        trunk: Vec<Layer>,
        heads: Vec<Head>,
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut running = BTreeMap::new();
        for layer in trunk.iter().chain(heads.iter().flat_map(|h| &h.layers)) {
            Self::init_layer(name, layer, &mut rng, &mut params, &mut running);
        }
        let net = Self {
            name: name.to_string(),
            trunk,
            heads,
            params,
            running,
            input_shape,
            output_shape,
        };
        net.assert_smooth_ops();
        net
    }

    fn init_layer(
        net: &str,
        layer: &Layer,
        rng: &mut ChaCha8Rng,
        params: &mut BTreeMap<String, Tensor<T>>,
        running: &mut BTreeMap<String, Running<T>>,
    ) {
        match layer {
            Layer::Conv3x3 {
                name,
                in_c,
                out_c,
                bn,
                ..
            } => {
                let std = (2.0 / (*in_c as f64 * 9.0)).sqrt();
                params.insert(
                    pname(net, name, "w"),
                    Tensor::randn(vec![*out_c, *in_c, 3, 3], std, rng),
                );
                params.insert(pname(net, name, "b"), Tensor::zeros(vec![*out_c]));
                if *bn {
                    params.insert(pname(net, name, "bn_g"), Tensor::full(vec![*out_c], T::ONE));
                    params.insert(pname(net, name, "bn_b"), Tensor::zeros(vec![*out_c]));
                    running.insert(
                        pname(net, name, "bn"),
                        Running {
                            mean: vec![T::ZERO; *out_c],
                            var: vec![T::ONE; *out_c],
                        },
                    );
                }
            }
            Layer::Dense {
                name, in_w, out_w, ..
            } => {
                let std = (2.0 / *in_w as f64).sqrt();
                params.insert(
                    pname(net, name, "w"),
                    Tensor::randn(vec![*in_w, *out_w], std, rng),
                );
                params.insert(pname(net, name, "b"), Tensor::zeros(vec![*out_w]));
            }
            _ => {}
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn head_names(&self) -> Vec<&str> {
        self.heads.iter().map(|h| h.name.as_str()).collect()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.keys().map(|s| s.as_str()).collect()
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.layers.iter()))
    }

    /// Every layer lowers to approved smooth operators; the checkerboard
    /// set is absent. Panics otherwise.
    pub fn assert_smooth_ops(&self) {
        let approved: Vec<&str> = catalog()
            .iter()
            .map(|op| op.name)
            .chain(COMPOSITE_OPS.iter().copied())
            .collect();
        for layer in self.layers() {
            for op in layer.op_ids() {
                assert!(
                    !FORBIDDEN_OPS.contains(&op),
                    "{}: forbidden operator {op}",
                    self.name
                );
                assert!(
                    approved.contains(&op),
                    "{}: operator {op} is not in the approved set",
                    self.name
                );
            }
        }
    }

    /// Snapshots all parameters onto a tape as leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> TapeBinding {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.params {
            let id = tape.leaf_data(tensor.shape().to_vec(), tensor.data().to_vec(), trainable);
            ids.insert(name.clone(), id);
        }
        TapeBinding { ids, trainable }
    }

    fn run_layers(
        &self,
        tape: &mut Tape<T>,
        binding: &TapeBinding,
        layers: &[Layer],
        mut x: ValueId,
        opts: &mut ForwardOpts<'_>,
        running_out: &mut Vec<RunningUpdate<T>>,
    ) -> ValueId {
        for layer in layers {
            x = match layer {
                Layer::Conv3x3 {
                    name, bn, act, ..
                } => {
                    let w = binding.id(&pname(&self.name, name, "w"));
                    let b = binding.id(&pname(&self.name, name, "b"));
                    let mut y = tape.conv2d(x, w, 1);
                    y = tape.add_channel_bias(y, b);
                    if *bn {
                        let g = binding.id(&pname(&self.name, name, "bn_g"));
                        let be = binding.id(&pname(&self.name, name, "bn_b"));
                        let key = pname(&self.name, name, "bn");
                        if opts.train {
                            let (z, mean, var) =
                                tape.batch_norm(y, g, be, T::from_f64(BN_EPS));
                            running_out.push(RunningUpdate {
                                layer: key,
                                mean,
                                var,
                            });
                            y = z;
                        } else {
                            let r = &self.running[&key];
                            y = tape.batch_norm_affine(
                                y,
                                g,
                                be,
                                r.mean.clone(),
                                r.var.clone(),
                                T::from_f64(BN_EPS),
                            );
                        }
                    }
                    if *act {
                        y = tape.elu(y);
                    }
                    y
                }
                Layer::Dense { name, act, .. } => {
                    let w = binding.id(&pname(&self.name, name, "w"));
                    let b = binding.id(&pname(&self.name, name, "b"));
                    let mut y = tape.matmul(x, w);
                    y = tape.add_row_bias(y, b);
                    if *act {
                        y = tape.elu(y);
                    }
                    y
                }
                Layer::AvgPool { kernel, stride } => tape.avg_pool(x, *kernel, *stride),
                Layer::GlobalAvgPool => {
                    let s = tape.shape(x);
                    assert_eq!(s.len(), 4);
                    assert_eq!(s[2], s[3], "global pool needs a square grid");
                    let k = s[2];
                    tape.avg_pool(x, k, 1)
                }
                Layer::Upsample2 => tape.upsample_nearest2(x),
                Layer::Reshape { shape } => {
                    let n = tape.shape(x)[0];
                    let mut target = Vec::with_capacity(shape.len() + 1);
                    target.push(n);
                    target.extend_from_slice(shape);
                    tape.reshape(x, target)
                }
                Layer::Flatten => {
                    let s = tape.shape(x);
                    let n = s[0];
                    let w: usize = s[1..].iter().product();
                    tape.reshape(x, vec![n, w])
                }
                Layer::NormalizePairs => tape.normalize_pairs(x, T::from_f64(PAIR_EPS)),
                Layer::Squash01 => tape.squash01(x),
                Layer::ConcatAttr { width } => {
                    let attrs = opts
                        .attrs
                        .expect("network has a ConcatAttr layer but no attrs were provided");
                    let sa = tape.shape(attrs);
                    assert_eq!(sa.len(), 2, "attrs must be [n, width]");
                    assert_eq!(sa[1], *width, "attr width mismatch");
                    let s = tape.shape(x);
                    assert_eq!(s.len(), 4);
                    let (h, w) = (s[2], s[3]);
                    let planes = tape.broadcast_spatial(attrs, h, w);
                    tape.concat(&[x, planes], 1)
                }
                Layer::Dropout { rate } => {
                    if opts.train {
                        let rng = opts
                            .rng
                            .as_mut()
                            .expect("dropout in train mode needs an rng");
                        let n = tape.value(x).len();
                        let keep = 1.0 - rate;
                        let mut mask = Vec::with_capacity(n);
                        for _ in 0..n {
                            let mut bytes = [0u8; 8];
                            rng.fill_bytes(&mut bytes);
                            // 53-bit uniform in [0, 1)
                            let u =
                                (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64;
                            mask.push(T::from_f64(if u < keep { 1.0 / keep } else { 0.0 }));
                        }
                        let mask = tape.constant(tape.shape(x).to_vec(), mask);
                        tape.mul(x, mask)
                    } else {
                        x
                    }
                }
            };
        }
        x
    }

    /// Single-output forward (trunk only). Returns the output id plus the
    /// batch-statistics observations collected from normalization layers in
    /// train mode; fold them back with [`Network::apply_running_updates`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        binding: &TapeBinding,
        input: ValueId,
        opts: &mut ForwardOpts<'_>,
    ) -> (ValueId, Vec<RunningUpdate<T>>) {
        assert!(
            self.heads.is_empty(),
            "{} has heads; use forward_multi",
            self.name
        );
        let mut running = Vec::new();
        let out = self.check_and_run(tape, binding, input, opts, &mut running);
        (out, running)
    }

    /// Multi-head forward: trunk, then each head on the trunk output.
    pub fn forward_multi(
        &self,
        tape: &mut Tape<T>,
        binding: &TapeBinding,
        input: ValueId,
        opts: &mut ForwardOpts<'_>,
    ) -> (Vec<ValueId>, Vec<RunningUpdate<T>>) {
        let mut running = Vec::new();
        let trunk_out = self.check_and_run(tape, binding, input, opts, &mut running);
        if self.heads.is_empty() {
            return (vec![trunk_out], running);
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let y = self.run_layers(tape, binding, &head.layers, trunk_out, opts, &mut running);
            outs.push(y);
        }
        (outs, running)
    }

    fn check_and_run(
        &self,
        tape: &mut Tape<T>,
        binding: &TapeBinding,
        input: ValueId,
        opts: &mut ForwardOpts<'_>,
        running: &mut Vec<RunningUpdate<T>>,
    ) -> ValueId {
        let s = tape.shape(input);
        assert_eq!(
            &s[1..],
            self.input_shape.as_slice(),
            "{}: input shape {:?}, declared {:?}",
            self.name,
            s,
            self.input_shape
        );
        self.run_layers(tape, binding, &self.trunk, input, opts, running)
    }

    /// Frozen evaluation: leaves are non-trainable, normalization uses
    /// running statistics, dropout is off.
    pub fn eval(&self, tape: &mut Tape<T>, input: ValueId, attrs: Option<ValueId>) -> ValueId {
        assert!(self.heads.is_empty(), "use eval_multi for {}", self.name);
        let binding = self.bind(tape, false);
        let mut opts = ForwardOpts {
            train: false,
            rng: None,
            attrs,
        };
        let mut running = Vec::new();
        self.check_and_run(tape, &binding, input, &mut opts, &mut running)
    }

    pub fn eval_multi(&self, tape: &mut Tape<T>, input: ValueId) -> Vec<ValueId> {
        let binding = self.bind(tape, false);
        let mut opts = ForwardOpts::eval();
        let (outs, _) = self.forward_multi(tape, &binding, input, &mut opts);
        outs
    }

    /// Blends observed batch statistics into the stored running statistics.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>]) {
        let m = T::from_f64(BN_MOMENTUM);
        let one_m = T::from_f64(1.0 - BN_MOMENTUM);
        for u in updates {
            let r = self
                .running
                .get_mut(&u.layer)
                .unwrap_or_else(|| panic!("no running stats for {}", u.layer));
            for (rm, bm) in r.mean.iter_mut().zip(&u.mean) {
                *rm = m * *rm + one_m * *bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&u.var) {
                *rv = m * *rv + one_m * *bv;
            }
        }
    }

    /// Dense gradient per parameter; parameters outside the differentiated
    /// subgraph get zeros.
    pub fn collect_grads(
        &self,
        grads: &Gradients<T>,
        binding: &TapeBinding,
    ) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (name, tensor) in &self.params {
            let id = binding.id(name);
            out.insert(name.clone(), grads.dense(id, tensor.numel()));
        }
        out
    }

    /// One optimizer application over every parameter, in name order.
    pub fn apply_grads(
        &mut self,
        opt: &mut AdamOptimizer<T>,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<(), AutodiffError> {
        for (name, tensor) in self.params.iter_mut() {
            let g = grads
                .get(name)
                .unwrap_or_else(|| panic!("missing gradient for {name}"));
            opt.update(name, tensor.data_mut(), g)?;
        }
        Ok(())
    }

    // ---- persistence -------------------------------------------------

    /// Parameters plus running statistics as checkpoint entries.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = Vec::new();
        for (name, t) in &self.params {
            out.push((name.clone(), t.map_precision()));
        }
        for (name, r) in &self.running {
            out.push((
                format!("{name}_rm"),
                Tensor::from_parts(
                    vec![r.mean.len()],
                    r.mean.iter().map(|v| v.to_f64() as f32).collect(),
                ),
            ));
            out.push((
                format!("{name}_rv"),
                Tensor::from_parts(
                    vec![r.var.len()],
                    r.var.iter().map(|v| v.to_f64() as f32).collect(),
                ),
            ));
        }
        out
    }

    /// Restores parameters and running statistics from checkpoint entries.
    /// Every entry must match a known name and shape; every parameter must
    /// be covered.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<(), ModelError> {
        let mut seen = 0usize;
        for (name, value) in entries {
            if let Some(t) = self.params.get_mut(name) {
                if t.shape() != value.shape() {
                    return Err(ModelError::CheckpointMismatch(format!(
                        "{name}: shape {:?} vs {:?}",
                        value.shape(),
                        t.shape()
                    )));
                }
                *t = value.map_precision();
                seen += 1;
            } else if let Some(key) = name.strip_suffix("_rm").filter(|k| self.running.contains_key(*k)) {
                let r = self.running.get_mut(key).unwrap();
                r.mean = value.data().iter().map(|v| T::from_f64(*v as f64)).collect();
            } else if let Some(key) = name.strip_suffix("_rv").filter(|k| self.running.contains_key(*k)) {
                let r = self.running.get_mut(key).unwrap();
                r.var = value.data().iter().map(|v| T::from_f64(*v as f64)).collect();
            } else {
                return Err(ModelError::CheckpointMismatch(format!(
                    "unknown entry {name}"
                )));
            }
        }
        if seen != self.params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} of {} parameters covered",
                seen,
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        save_checkpoint(path, &self.checkpoint_entries())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), ModelError> {
        let entries = load_checkpoint(path)
            .map_err(|e| ModelError::CheckpointMismatch(e.to_string()))?;
        self.load_entries(&entries)
    }
}
