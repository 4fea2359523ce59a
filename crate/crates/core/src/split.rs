//! Target/conditioning year selection for training and holdout.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// NLCD epochs available for training.
pub const NLCD_TRAIN_YEARS: [u16; 8] = [2001, 2004, 2006, 2008, 2011, 2013, 2016, 2019];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPair {
    pub target: u16,
    /// Chronological conditioning years.
    pub conditioning: Vec<u16>,
}

/// Conditioning years for one target: the `n` most recent years that are
/// at least `lag` years older, in chronological order.
pub fn conditioning_years(years: &[u16], target: u16, lag: u16, n: usize) -> Result<Vec<u16>> {
    let mut eligible: Vec<u16> =
        years.iter().copied().filter(|&y| y.checked_add(lag).is_some_and(|l| l <= target)).collect();
    eligible.sort_unstable();
    eligible.dedup();
    if n == 0 || eligible.len() < n {
        return Err(Error::Insufficient(format!(
            "target {target} has {} years at least {lag} years older, need {n}",
            eligible.len()
        )));
    }
    Ok(eligible.split_off(eligible.len() - n))
}

/// Enumerates (target, conditioning) pairs, skipping any target listed in
/// `holdout`.
pub fn make_split(
    years: &[u16],
    targets: &[u16],
    holdout: &[u16],
    lag: u16,
    n: usize,
) -> Result<Vec<SplitPair>> {
    let mut pairs = Vec::new();
    for &target in targets {
        if holdout.contains(&target) {
            continue;
        }
        if !years.contains(&target) {
            return Err(Error::param(format!("target {target} is not an available year")));
        }
        let conditioning = conditioning_years(years, target, lag, n)?;
        pairs.push(SplitPair { target, conditioning });
    }
    if pairs.is_empty() {
        return Err(Error::Insufficient("no trainable target years".into()));
    }
    Ok(pairs)
}
