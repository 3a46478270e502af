use super::{Image24, WatermarkError};

fn check_dims(a: &Image24, b: &Image24) -> Result<(), WatermarkError> {
    if a.width != b.width || a.height != b.height {
        return Err(WatermarkError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// Mean squared error over every channel sample.
pub fn mse(original: &Image24, covered: &Image24) -> Result<f64, WatermarkError> {
    check_dims(original, covered)?;
    let sum: u64 = original
        .channel_bytes()
        .zip(covered.channel_bytes())
        .map(|(a, b)| {
            let d = u64::from(a.abs_diff(b));
            d * d
        })
        .sum();
    Ok(sum as f64 / (original.pixels.len() * 3) as f64)
}

/// `10 log10(255^2 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(original: &Image24, covered: &Image24) -> Result<f64, WatermarkError> {
    let mse = mse(original, covered)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}
