use super::NnError;

/// Dense row-major tensor of up to five axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        if shape.is_empty() || shape.len() > 5 || shape.iter().any(|&s| s == 0) {
            return Err(NnError::ShapeMismatch(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self, NnError> {
        Tensor::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// View as `[n, c, d, h, w]`; 4-axis tensors get a unit depth axis.
    pub fn dims5(&self) -> Result<[usize; 5], NnError> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok([n, c, 1, h, w]),
            [n, c, d, h, w] => Ok([n, c, d, h, w]),
            _ => Err(NnError::ShapeMismatch(format!(
                "expected a 4 or 5 axis tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// Builds a tensor with the same rank convention as `like`.
    pub(crate) fn with_dims5(like_rank: usize, dims: [usize; 5], data: Vec<f64>) -> Self {
        let shape = if like_rank == 4 {
            vec![dims[0], dims[1], dims[3], dims[4]]
        } else {
            dims.to_vec()
        };
        Tensor { shape, data }
    }

    /// Sample `i` of a batch as a batch of one.
    pub fn batch_item(&self, i: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    /// Concatenates batches along the first axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor, NnError> {
        let first = items.first().ok_or_else(|| NnError::ShapeMismatch("empty batch".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(NnError::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}
