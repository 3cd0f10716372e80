use crate::{Backward, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
    Exp,
    Ln,
    Abs,
    Square,
    Sqrt,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Neg => -x,
            Self::Scale(c) => c * x,
            Self::AddScalar(c) => x + c,
            Self::Relu => x.max(0.0),
            Self::Sigmoid => sigmoid(x),
            Self::Softplus => softplus(x),
            Self::Exp => x.exp(),
            Self::Ln => x.ln(),
            Self::Abs => x.abs(),
            Self::Square => x * x,
            Self::Sqrt => x.sqrt(),
        }
    }

    /// d(out)/d(in) given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Neg => -1.0,
            Self::Scale(c) => c,
            Self::AddScalar(_) => 1.0,
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Sigmoid => y * (1.0 - y),
            Self::Softplus => sigmoid(x),
            Self::Exp => y,
            Self::Ln => 1.0 / x,
            Self::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Self::Square => 2.0 * x,
            Self::Sqrt => 0.5 / y,
        }
    }
}

struct UnaryOp(UnaryKind);

impl Backward for UnaryOp {
    fn name(&self) -> &'static str {
        "unary"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0].data();
        let y = output.data();
        let data = grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, g)| g * self.0.derivative(x[i], y[i]))
            .collect();
        vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))]
    }
}

struct BinaryOp(BinaryKind);

impl Backward for BinaryOp {
    fn name(&self) -> &'static str {
        "binary"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let g = grad.data();
        let shape = grad.shape().to_vec();
        let make = |f: &dyn Fn(usize) -> f64| Tensor::from_parts(shape.clone(), (0..g.len()).map(f).collect());
        let (ga, gb) = match self.0 {
            BinaryKind::Add => (
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.clone()),
            ),
            BinaryKind::Sub => (
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.map(|v| -v)),
            ),
            BinaryKind::Mul => (
                needs[0].then(|| make(&|i| g[i] * b[i])),
                needs[1].then(|| make(&|i| g[i] * a[i])),
            ),
            BinaryKind::Div => (
                needs[0].then(|| make(&|i| g[i] / b[i])),
                needs[1].then(|| make(&|i| -g[i] * a[i] / (b[i] * b[i]))),
            ),
        };
        vec![ga, gb]
    }
}

/// Adds a vector along one axis: `out[.., i, ..] = x[.., i, ..] + b[i]`.
struct AddAlongAxis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for AddAlongAxis {
    fn name(&self) -> &'static str {
        "add_along_axis"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let gb = needs[1].then(|| {
            let g = grad.data();
            let mut out = vec![0.0; self.len];
            for o in 0..self.outer {
                for (i, acc) in out.iter_mut().enumerate() {
                    let base = (o * self.len + i) * self.inner;
                    *acc += g[base..base + self.inner].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![self.len], out)
        });
        vec![needs[0].then(|| grad.clone()), gb]
    }
}

impl<'t> Var<'t> {
    pub fn unary(self, kind: UnaryKind) -> Var<'t> {
        let out = self.value().map(|v| kind.apply(v));
        self.tape().record(out, &[self], UnaryOp(kind))
    }

    pub fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape().record(out, &[self, other], BinaryOp(kind)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Ln)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    /// Adds `bias` (shape `[shape[axis]]`) along `axis`.
    pub fn add_along_axis(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let (outer, len, inner) = super::split_axis("add_along_axis", x.shape(), axis)?;
        if b.shape() != [len] {
            return Err(TensorError::ShapeMismatch {
                op: "add_along_axis",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for (i, &bv) in b.data().iter().enumerate() {
                let base = (o * len + i) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.tape().record(out, &[self, bias], AddAlongAxis { outer, len, inner }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bias_gradient_sums_over_other_axes() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 3, 4]));
        let b = tape.param(Tensor::from_fn(&[3], |i| i as f64));
        let y = x.add_along_axis(b, 1).unwrap();
        assert_eq!(y.value().get(&[1, 2, 3]), 2.0);
        tape.backward(y.sum()).unwrap();
        assert_eq!(b.grad().unwrap(), Tensor::full(&[3], 8.0));
    }
}
