use msas_tensor::{Result, Tensor, TensorError};

/// FIFO feature queue: a K x D ring buffer of detached key features.
///
/// Until the queue has been written to capacity, only the filled prefix is
/// handed out as negatives; placeholder rows are never contrasted against.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    pub capacity: usize,
    pub dim: usize,
    data: Vec<f64>,
    ptr: usize,
    filled: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FeatureQueue { capacity, dim, data: vec![0.0; capacity * dim], ptr: 0, filled: 0 }
    }

    pub fn ptr(&self) -> usize {
        self.ptr
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    /// Overwrite rows [ptr, ptr + B) with `keys` and advance the pointer by
    /// B modulo K. B must divide K, so a write never wraps mid-batch.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let (batch, dim) = keys.dims2("enqueue")?;
        if dim != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "enqueue",
                detail: format!("key dim {dim}, queue dim {}", self.dim),
            });
        }
        if batch == 0 || self.capacity % batch != 0 {
            return Err(TensorError::InvalidArg {
                op: "enqueue",
                detail: format!("batch {batch} must divide queue size {}", self.capacity),
            });
        }
        let start = self.ptr * self.dim;
        self.data[start..start + batch * self.dim].copy_from_slice(keys.data());
        self.ptr = (self.ptr + batch) % self.capacity;
        self.filled = (self.filled + batch).min(self.capacity);
        Ok(())
    }

    /// The filled prefix as an M x D tensor (M = filled rows so far).
    pub fn negatives(&self) -> Tensor {
        Tensor::new(vec![self.filled, self.dim], self.data[..self.filled * self.dim].to_vec())
            .expect("prefix shape")
    }

    /// Full buffer including unwritten rows, for checkpointing.
    pub fn raw(&self) -> Tensor {
        Tensor::new(vec![self.capacity, self.dim], self.data.clone()).expect("buffer shape")
    }

    pub fn from_parts(raw: Tensor, ptr: usize, filled: usize) -> Result<Self> {
        let (capacity, dim) = raw.dims2("FeatureQueue::from_parts")?;
        if ptr >= capacity.max(1) || filled > capacity {
            return Err(TensorError::InvalidArg {
                op: "FeatureQueue::from_parts",
                detail: format!("ptr {ptr} / filled {filled} out of range for capacity {capacity}"),
            });
        }
        Ok(FeatureQueue { capacity, dim, data: raw.into_data(), ptr, filled })
    }

    /// Max deviation of any filled row from unit L2 norm (state audit).
    pub fn worst_norm_error(&self) -> f64 {
        (0..self.filled)
            .map(|row| {
                let norm = self.data[row * self.dim..(row + 1) * self.dim]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                (norm - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(batch: usize, dim: usize, fill: f64) -> Tensor {
        Tensor::full(vec![batch, dim], fill)
    }

    #[test]
    fn fifo_fill_and_wrap() {
        let mut q = FeatureQueue::new(8, 2);
        q.enqueue(&keys(4, 2, 1.0)).unwrap();
        assert_eq!((q.ptr(), q.filled()), (4, 4));
        q.enqueue(&keys(4, 2, 2.0)).unwrap();
        assert_eq!((q.ptr(), q.filled()), (0, 8)); // wrapped after K/B enqueues
        q.enqueue(&keys(4, 2, 3.0)).unwrap(); // overwrites the oldest half
        assert_eq!((q.ptr(), q.filled()), (4, 8));
        let negs = q.negatives();
        assert_eq!(negs.data()[0], 3.0);
        assert_eq!(negs.data()[8], 2.0);
    }

    #[test]
    fn warm_fill_exposes_only_written_prefix() {
        let mut q = FeatureQueue::new(8, 3);
        assert_eq!(q.negatives().shape(), &[0, 3]);
        q.enqueue(&keys(2, 3, 1.0)).unwrap();
        assert_eq!(q.negatives().shape(), &[2, 3]);
        q.enqueue(&keys(2, 3, 1.0)).unwrap();
        assert_eq!(q.negatives().shape(), &[4, 3]);
    }

    #[test]
    fn batch_must_divide_capacity() {
        let mut q = FeatureQueue::new(8, 2);
        assert!(q.enqueue(&keys(3, 2, 1.0)).is_err());
        assert!(q.enqueue(&keys(0, 2, 1.0)).is_err());
    }
}
