use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

/// Running arithmetic mean of parameter snapshots.
#[derive(Debug, Clone)]
pub struct Swa<T> {
    average: Vec<Tensor<T>>,
    count: usize,
    pub start_epoch: usize,
}

impl<T: Scalar> Swa<T> {
    pub fn new(start_epoch: usize) -> Self {
        Swa {
            average: Vec::new(),
            count: 0,
            start_epoch,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn accumulate(&mut self, params: &[&Param<T>]) -> Result<()> {
        let values: Vec<&Tensor<T>> = params.iter().map(|p| &p.value).collect();
        self.accumulate_tensors(&values)
    }

    /// `avg += (w - avg) / (n + 1)`; the first snapshot is copied verbatim.
    pub fn accumulate_tensors(&mut self, snapshot: &[&Tensor<T>]) -> Result<()> {
        if self.count == 0 {
            self.average = snapshot.iter().map(|t| (*t).clone()).collect();
            self.count = 1;
            return Ok(());
        }
        if snapshot.len() != self.average.len() {
            return Err(Error::invalid(format!(
                "snapshot has {} tensors, average has {}",
                snapshot.len(),
                self.average.len()
            )));
        }
        let k = T::of((self.count + 1) as f64);
        for (avg, w) in self.average.iter_mut().zip(snapshot) {
            w.expect_shape(avg.shape(), "swa_accumulate")?;
            for (a, &x) in avg.data_mut().iter_mut().zip(w.data()) {
                *a += (x - *a) / k;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn finalize(&self) -> Result<Vec<Tensor<T>>> {
        if self.count == 0 {
            return Err(Error::EmptyAverage);
        }
        Ok(self.average.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_snapshot_is_identity() {
        let w = Tensor::from_vec(&[3], vec![0.1f32, -7.25, 3.0e-9]).unwrap();
        let mut swa = Swa::new(1);
        swa.accumulate_tensors(&[&w]).unwrap();
        assert_eq!(swa.finalize().unwrap(), vec![w]);
    }

    #[test]
    fn mean_of_two_scalars() {
        let mut swa = Swa::new(1);
        swa.accumulate_tensors(&[&Tensor::scalar(2.0f64)]).unwrap();
        swa.accumulate_tensors(&[&Tensor::scalar(4.0f64)]).unwrap();
        assert_eq!(swa.finalize().unwrap()[0].item(), Some(3.0));
    }

    #[test]
    fn finalize_without_snapshots_fails() {
        assert!(matches!(
            Swa::<f32>::new(1).finalize(),
            Err(Error::EmptyAverage)
        ));
    }
}
