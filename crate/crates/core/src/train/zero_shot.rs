use crate::error::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the class embedding with the highest cosine similarity to
/// `image`. Ties go to the lowest index.
pub fn zero_shot_classify(image: &[f64], classes: &[Vec<f64>]) -> Result<usize> {
    if classes.len() < 2 {
        return Err(Error::Config(format!("zero-shot needs at least 2 classes, got {}", classes.len())));
    }
    let image_norm = norm(image);
    if image_norm == 0.0 {
        return Err(Error::Numeric("zero-shot: image embedding has zero norm".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in classes.iter().enumerate() {
        if c.len() != image.len() {
            return Err(crate::error::dim_err!("zero-shot: class {k} has {} dims, image has {}", c.len(), image.len()));
        }
        let n = norm(c);
        if n == 0.0 {
            return Err(Error::Numeric(format!("zero-shot: class embedding {k} has zero norm")));
        }
        let cos = image.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (image_norm * n);
        if cos > best.1 {
            best = (k, cos);
        }
    }
    Ok(best.0)
}
