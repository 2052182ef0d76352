use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SCHEDULE: [usize; 4] = [32, 64, 128, 256];

/// Square output resolutions of the pyramid levels, coarsest first. Each
/// level is exactly twice its predecessor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ResolutionSchedule {
    levels: Vec<usize>,
}

impl ResolutionSchedule {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Schedule("schedule has no levels".into()));
        }
        if levels[0] == 0 {
            return Err(Error::Schedule("resolutions must be positive".into()));
        }
        for pair in levels.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(Error::Schedule(format!(
                    "{} does not double {}",
                    pair[1], pair[0]
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Parses a comma separated list such as `32,64,128`.
    pub fn parse(text: &str) -> Result<Self> {
        let levels = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Schedule(format!("not a resolution: {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn coarsest(&self) -> usize {
        self.levels[0]
    }

    pub fn finest(&self) -> usize {
        *self.levels.last().expect("non-empty")
    }

    /// Resolution of 1-based level `n`.
    pub fn resolution(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.levels.len() {
            return Err(Error::Schedule(format!(
                "level {n} outside 1..={}",
                self.levels.len()
            )));
        }
        Ok(self.levels[n - 1])
    }

    /// The schedule extended by one doubling stage.
    pub fn grown(&self) -> Self {
        let mut levels = self.levels.clone();
        levels.push(2 * self.finest());
        Self { levels }
    }
}

impl Default for ResolutionSchedule {
    fn default() -> Self {
        Self {
            levels: DEFAULT_SCHEDULE.to_vec(),
        }
    }
}

impl TryFrom<Vec<usize>> for ResolutionSchedule {
    type Error = Error;

    fn try_from(levels: Vec<usize>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<ResolutionSchedule> for Vec<usize> {
    fn from(s: ResolutionSchedule) -> Self {
        s.levels
    }
}

/// `[coarsest, 2·coarsest, …, finest]`.
pub fn make_schedule(coarsest: usize, finest: usize) -> Result<ResolutionSchedule> {
    if coarsest == 0 || finest < coarsest || finest % coarsest != 0 {
        return Err(Error::Schedule(format!(
            "{finest} is not a power-of-two multiple of {coarsest}"
        )));
    }
    let ratio = finest / coarsest;
    if !ratio.is_power_of_two() {
        return Err(Error::Schedule(format!(
            "{finest} is not a power-of-two multiple of {coarsest}"
        )));
    }
    let mut levels = vec![coarsest];
    while *levels.last().unwrap() < finest {
        levels.push(levels.last().unwrap() * 2);
    }
    ResolutionSchedule::new(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn doubling_examples() {
        assert_eq!(make_schedule(32, 256).unwrap().levels(), &[32, 64, 128, 256]);
        assert_eq!(make_schedule(64, 64).unwrap().levels(), &[64]);
        assert_eq!(make_schedule(64, 256).unwrap().levels(), &[64, 128, 256]);
        assert_eq!(ResolutionSchedule::default().finest(), 256);
    }

    #[test]
    fn rejects_bad_ratios() {
        assert!(matches!(make_schedule(32, 96), Err(Error::Schedule(_))));
        assert!(matches!(make_schedule(64, 32), Err(Error::Schedule(_))));
        assert!(matches!(make_schedule(0, 32), Err(Error::Schedule(_))));
        assert!(ResolutionSchedule::new(vec![32, 48]).is_err());
        assert!(ResolutionSchedule::parse("32,64,x").is_err());
        assert_eq!(ResolutionSchedule::parse("32, 64").unwrap().levels(), &[32, 64]);
    }

    #[test]
    fn serde_validates() {
        let s: ResolutionSchedule = serde_json::from_str("[16,32]").unwrap();
        assert_eq!(s.finest(), 32);
        assert!(serde_json::from_str::<ResolutionSchedule>("[16,30]").is_err());
    }

    proptest! {
        #[test]
        fn growth_doubles_last(c in 1usize..64, j in 0u32..5) {
            let s = make_schedule(c, c << j).unwrap();
            prop_assert_eq!(s.len(), j as usize + 1);
            let g = s.grown();
            prop_assert_eq!(g.finest(), 2 * s.finest());
            prop_assert!(ResolutionSchedule::new(g.levels().to_vec()).is_ok());
        }
    }
}
