use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// One epoch of bag indices. Each draw picks a class uniformly (every bag
/// weighted by the inverse of its class count), then a uniform member of
/// that class.
pub fn weighted_sampler(labels: &[usize], num_classes: usize, r: &mut Rng) -> Result<Vec<usize>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        let m = members
            .get_mut(l)
            .ok_or_else(|| Error::config(format!("label {l} out of range for {num_classes} classes")))?;
        m.push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("class {c} has no training bags")));
    }
    Ok((0..labels.len())
        .map(|_| {
            let class = &members[r.random_range(0..num_classes)];
            class[r.random_range(0..class.len())]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_class_and_errors() {
        let mut r = rng::seeded(0);
        let draws = weighted_sampler(&[0, 0, 0], 1, &mut r).unwrap();
        assert_eq!(draws.len(), 3);
        assert!(weighted_sampler(&[0, 0], 2, &mut r).is_err());
        assert!(weighted_sampler(&[0, 3], 2, &mut r).is_err());
    }
}
