//! Named operator catalog.
//!
//! The tape exposes typed builder methods; this layer adds a string-keyed
//! dispatch surface with `Result` errors, used by the gradient-check suite
//! and the Python bindings. The catalog deliberately contains only operators
//! that keep the training objective smooth: average pooling instead of
//! max-pooling, stride-one convolutions, nearest-neighbor upsampling instead
//! of transposed convolutions, and ELU activations.

use std::sync::OnceLock;

use super::tape::{Tape, ValueId};
use super::tensor::{numel, Tensor};
use super::{AutodiffError, Scalar};

/// How many inputs an operator consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Exact(usize),
    AtLeast(usize),
}

impl Arity {
    fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exact(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }

    fn describe(self) -> usize {
        match self {
            Arity::Exact(k) | Arity::AtLeast(k) => k,
        }
    }
}

/// One registered operator.
#[derive(Debug, Clone)]
pub struct CatalogOp {
    pub name: &'static str,
    pub arity: Arity,
    /// Attribute keys the operator requires in [`OpAttrs`].
    pub required_attrs: &'static [&'static str],
    /// Whether the operator is differentiable almost everywhere with bounded
    /// subgradients (abs and ELU count: their kinks are measure zero).
    pub smooth: bool,
}

/// Attributes for parameterized operators. Unused fields are ignored.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub pad: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub axis: Option<usize>,
    pub shape: Option<Vec<usize>>,
}

impl OpAttrs {
    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = Some(pad);
        self
    }

    pub fn kernel(mut self, kernel: usize) -> Self {
        self.kernel = Some(kernel);
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    pub fn axis(mut self, axis: usize) -> Self {
        self.axis = Some(axis);
        self
    }

    pub fn shape(mut self, shape: Vec<usize>) -> Self {
        self.shape = Some(shape);
        self
    }
}

/// Operator names whose presence would break the smooth-objective contract.
const FORBIDDEN: &[&str] = &["max_pool", "conv2d_strided", "conv_transpose", "deconv"];

const ENTRIES: &[CatalogOp] = &[
    CatalogOp { name: "add", arity: Arity::Exact(2), required_attrs: &[], smooth: true },
    CatalogOp { name: "sub", arity: Arity::Exact(2), required_attrs: &[], smooth: true },
    CatalogOp { name: "mul", arity: Arity::Exact(2), required_attrs: &[], smooth: true },
    CatalogOp { name: "div", arity: Arity::Exact(2), required_attrs: &[], smooth: true },
    CatalogOp { name: "abs", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "exp", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "log", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "sqrt", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "square", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "elu", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "matmul", arity: Arity::Exact(2), required_attrs: &[], smooth: true },
    CatalogOp { name: "conv2d", arity: Arity::Exact(2), required_attrs: &["pad"], smooth: true },
    CatalogOp {
        name: "avg_pool",
        arity: Arity::Exact(1),
        required_attrs: &["kernel", "stride"],
        smooth: true,
    },
    CatalogOp { name: "upsample_nearest", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "softmax", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "sum", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "mean", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "min", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "max", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
    CatalogOp { name: "concat", arity: Arity::AtLeast(1), required_attrs: &["axis"], smooth: true },
    CatalogOp { name: "reshape", arity: Arity::Exact(1), required_attrs: &["shape"], smooth: true },
    CatalogOp { name: "stop_gradient", arity: Arity::Exact(1), required_attrs: &[], smooth: true },
];

/// Panics if any registered operator violates the smooth-objective contract.
/// Runs once when the catalog is first accessed.
pub fn assert_catalog_smooth(entries: &[CatalogOp]) {
    for op in entries {
        assert!(
            op.smooth,
            "operator '{}' is registered as non-smooth",
            op.name
        );
        assert!(
            !FORBIDDEN.contains(&op.name),
            "operator '{}' is banned from the catalog",
            op.name
        );
    }
}

/// The registered operator list, validated on first access.
pub fn catalog() -> &'static [CatalogOp] {
    static CHECKED: OnceLock<()> = OnceLock::new();
    CHECKED.get_or_init(|| assert_catalog_smooth(ENTRIES));
    ENTRIES
}

fn lookup(name: &str) -> Result<&'static CatalogOp, AutodiffError> {
    catalog()
        .iter()
        .find(|op| op.name == name)
        .ok_or_else(|| AutodiffError::UnknownOp(name.to_string()))
}

fn need(attr: Option<usize>, op: &str, key: &'static str) -> Result<usize, AutodiffError> {
    attr.ok_or(AutodiffError::MissingAttr {
        op: op.to_string(),
        attr: key,
    })
}

fn shape_err(op: &str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(format!("{op}: {detail}"))
}

/// Records a catalog operator on an existing tape. Inputs are earlier tape
/// values; shape rules are validated and reported through errors rather than
/// panics.
pub fn record_op<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    inputs: &[ValueId],
    attrs: &OpAttrs,
) -> Result<ValueId, AutodiffError> {
    let op = lookup(name)?;
    if !op.arity.accepts(inputs.len()) {
        return Err(AutodiffError::BadArity {
            op: name.to_string(),
            expected: op.arity.describe(),
            got: inputs.len(),
        });
    }
    for &id in inputs {
        if !tape.value(id).iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite(format!("input of '{name}'")));
        }
    }
    let shape0 = tape.shape(inputs[0]).to_vec();
    let same_shapes = |tape: &Tape<T>| -> Result<(), AutodiffError> {
        let s1 = tape.shape(inputs[1]);
        if s1 != shape0.as_slice() {
            return Err(shape_err(name, format!("{shape0:?} vs {s1:?}")));
        }
        Ok(())
    };

    let id = match name {
        "add" => {
            same_shapes(tape)?;
            tape.add(inputs[0], inputs[1])
        }
        "sub" => {
            same_shapes(tape)?;
            tape.sub(inputs[0], inputs[1])
        }
        "mul" => {
            same_shapes(tape)?;
            tape.mul(inputs[0], inputs[1])
        }
        "div" => {
            same_shapes(tape)?;
            tape.div(inputs[0], inputs[1])
        }
        "abs" => tape.abs(inputs[0]),
        "exp" => tape.exp(inputs[0]),
        "log" => tape.log(inputs[0]),
        "sqrt" => tape.sqrt(inputs[0]),
        "square" => tape.square(inputs[0]),
        "elu" => tape.elu(inputs[0]),
        "matmul" => {
            let s1 = tape.shape(inputs[1]).to_vec();
            if shape0.len() != 2 || s1.len() != 2 || shape0[1] != s1[0] {
                return Err(shape_err(name, format!("{shape0:?} x {s1:?}")));
            }
            tape.matmul(inputs[0], inputs[1])
        }
        "conv2d" => {
            let pad = need(attrs.pad, name, "pad")?;
            let sw = tape.shape(inputs[1]).to_vec();
            if shape0.len() != 4 || sw.len() != 4 || shape0[1] != sw[1] {
                return Err(shape_err(name, format!("{shape0:?} * {sw:?}")));
            }
            if shape0[2] + 2 * pad + 1 <= sw[2] || shape0[3] + 2 * pad + 1 <= sw[3] {
                return Err(shape_err(name, format!("kernel {sw:?} exceeds input {shape0:?}")));
            }
            tape.conv2d(inputs[0], inputs[1], pad)
        }
        "avg_pool" => {
            let kernel = need(attrs.kernel, name, "kernel")?;
            let stride = need(attrs.stride, name, "stride")?;
            if shape0.len() != 4 || shape0[2] < kernel || shape0[3] < kernel || kernel == 0 || stride == 0
            {
                return Err(shape_err(name, format!("kernel {kernel} on {shape0:?}")));
            }
            tape.avg_pool(inputs[0], kernel, stride)
        }
        "upsample_nearest" => {
            if shape0.len() != 4 {
                return Err(shape_err(name, format!("{shape0:?}")));
            }
            tape.upsample_nearest2(inputs[0])
        }
        "softmax" => {
            if shape0.is_empty() {
                return Err(shape_err(name, "rank-0 input".to_string()));
            }
            tape.softmax(inputs[0])
        }
        "sum" => tape.sum_all(inputs[0]),
        "mean" => tape.mean_all(inputs[0]),
        "min" => tape.min_all(inputs[0]),
        "max" => tape.max_all(inputs[0]),
        "concat" => {
            let axis = need(attrs.axis, name, "axis")?;
            if axis >= shape0.len() {
                return Err(shape_err(name, format!("axis {axis} on rank {}", shape0.len())));
            }
            for &id in inputs {
                let s = tape.shape(id);
                if s.len() != shape0.len()
                    || s.iter()
                        .zip(&shape0)
                        .enumerate()
                        .any(|(d, (&a, &b))| d != axis && a != b)
                {
                    return Err(shape_err(name, format!("{shape0:?} vs {s:?} on axis {axis}")));
                }
            }
            tape.concat(inputs, axis)
        }
        "reshape" => {
            let shape = attrs.shape.clone().ok_or(AutodiffError::MissingAttr {
                op: name.to_string(),
                attr: "shape",
            })?;
            if numel(&shape) != numel(&shape0) {
                return Err(shape_err(name, format!("{shape0:?} -> {shape:?}")));
            }
            tape.reshape(inputs[0], shape)
        }
        "stop_gradient" => tape.stop_gradient(inputs[0]),
        _ => unreachable!("catalog lookup accepted unknown name"),
    };
    Ok(id)
}

/// One-shot evaluation of a catalog operator over plain tensors.
pub fn forward_op<T: Scalar>(
    name: &str,
    inputs: &[Tensor<T>],
    attrs: &OpAttrs,
) -> Result<Tensor<T>, AutodiffError> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = record_op(&mut tape, name, &ids, attrs)?;
    Ok(Tensor::from_parts(
        tape.shape(out).to_vec(),
        tape.value(out).to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_contains_no_forbidden_operators() {
        let names: Vec<&str> = catalog().iter().map(|op| op.name).collect();
        for banned in FORBIDDEN {
            assert!(!names.contains(banned), "{banned} must not be registered");
        }
        assert!(names.contains(&"avg_pool"));
        assert!(names.contains(&"elu"));
        assert!(names.contains(&"stop_gradient"));
    }

    #[test]
    fn registration_assert_rejects_smuggled_max_pool() {
        let bad = [CatalogOp {
            name: "max_pool",
            arity: Arity::Exact(1),
            required_attrs: &[],
            smooth: false,
        }];
        let err = std::panic::catch_unwind(|| assert_catalog_smooth(&bad));
        assert!(err.is_err());
    }

    #[test]
    fn elu_examples() {
        let x = Tensor::from_parts(vec![3], vec![1.0f64, 0.0, -20.0]);
        let y = forward_op("elu", &[x], &OpAttrs::default()).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[2] - ((-20.0f64).exp() - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn avg_pool_example() {
        let x = Tensor::from_parts(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let y = forward_op("avg_pool", &[x], &OpAttrs::default().kernel(2).stride(2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn unknown_operator_is_an_error() {
        let x = Tensor::from_parts(vec![1], vec![1.0f64]);
        let err = forward_op("max_pool", &[x], &OpAttrs::default()).unwrap_err();
        assert!(matches!(err, AutodiffError::UnknownOp(_)));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::from_parts(vec![2], vec![1.0f64, 2.0]);
        let b = Tensor::from_parts(vec![3], vec![1.0f64, 2.0, 3.0]);
        let err = forward_op("add", &[a, b], &OpAttrs::default()).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch(_)));
    }

    #[test]
    fn missing_attr_is_an_error() {
        let x = Tensor::from_parts(vec![1, 1, 4, 4], vec![0.0f64; 16]);
        let err = forward_op("avg_pool", &[x], &OpAttrs::default()).unwrap_err();
        assert!(matches!(err, AutodiffError::MissingAttr { .. }));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let x = Tensor::from_parts(vec![1], vec![f64::NAN]);
        let err = forward_op("abs", &[x], &OpAttrs::default()).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite(_)));
    }
}
