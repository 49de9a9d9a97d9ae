use crate::error::{Error, Result};

/// Reported in place of an infinite PSNR (zero error).
pub const PSNR_CAP: f64 = 99.0;

/// Overlap of the voxels whose label lies in `region`. Two empty sets score 1.
pub fn dice(pred: &[u8], gt: &[u8], region: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice", "voxel count", gt.len(), pred.len()));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let ia = region.contains(&a);
        let ib = region.contains(&b);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mse", "voxel count", b.len(), a.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse", "empty input"));
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(range² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid("psnr", format!("data range must be positive, got {data_range}")));
    }
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(synth: &[f32], gt: &[f32], data_range: f64) -> Result<f64> {
    psnr_from_mse(mse(synth, gt)?, data_range)
}
