use crate::{Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
///
/// Rank 0 (`shape == []`) is a scalar with one element. Public constructors
/// reject non-finite values and shape/length mismatches; tape operations
/// preserve finiteness by validating their numeric domains (and downstream
/// consumers re-check at module boundaries), so a NaN or infinity is always
/// a hard error rather than silent propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Array {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Array {
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Array {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Construct from raw data, validating length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Array> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        let a = Array {
            shape: shape.to_vec(),
            data,
        };
        a.assert_finite("from_vec input")?;
        Ok(a)
    }

    /// Internal constructor for op outputs whose finiteness is guaranteed by
    /// the op's own domain checks.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Array {
        debug_assert_eq!(numel(&shape), data.len());
        Array { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single element of a one-element array.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Split the shape as (leading product, last axis). Scalars are (1, 1).
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.shape.last() {
            Some(&last) => (self.data.len() / last.max(1), last),
            None => (1, 1),
        }
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{what}: element {i} of shape {:?} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }
}
