//! Conversions between ndarray arrays (diffusion arithmetic, f64) and candle
//! tensors (network side).

use candle_core::{DType, Device, Tensor};
use ndarray::{Array, Dimension, IxDyn};

use crate::error::{Error, Result};

pub fn to_tensor<D: Dimension>(a: &Array<f64, D>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.shape(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_array<D: Dimension>(t: &Tensor) -> Result<Array<f64, D>> {
    let data = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let a = Array::from_shape_vec(IxDyn(t.dims()), data)
        .map_err(|e| Error::Parameter(e.to_string()))?;
    a.into_dimensionality::<D>()
        .map_err(|_| Error::Shape {
            expected: vec![D::NDIM.unwrap_or(0)],
            actual: t.dims().to_vec(),
        })
}
