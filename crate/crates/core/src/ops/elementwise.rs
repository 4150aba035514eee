use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(self
            .tape()
            .record("add", &[self, other], out, |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(self
            .tape()
            .record("sub", &[self, other], out, |g| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(other.value(), |a, b| a * b)?;
        let (a, b) = (self.value_arc(), other.value_arc());
        Ok(self.tape().record("mul", &[self, other], out, move |g| {
            vec![
                Some(g.zip_map(&b, |g, b| g * b).expect("same shape")),
                Some(g.zip_map(&a, |g, a| g * a).expect("same shape")),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape().record("scale", &[self], out, move |g| vec![Some(g.scale(s))])
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        let y = std::sync::Arc::new(out.clone());
        self.tape().record("exp", &[self], out, move |g| {
            vec![Some(g.zip_map(&y, |g, y| g * y).expect("same shape"))]
        })
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value().sum());
        self.tape()
            .record("sum", &[self], out, move |g| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    /// `sum(self * weights)` with constant `weights`; the usual probe loss in gradient checks.
    pub fn weighted_sum(&self, weights: &Tensor) -> Result<Var<'t>> {
        let prod = self.value().zip_map(weights, |a, b| a * b)?;
        let out = Tensor::scalar(prod.sum());
        let w = weights.clone();
        Ok(self
            .tape()
            .record("weighted_sum", &[self], out, move |g| vec![Some(w.scale(g.item()))]))
    }
}
