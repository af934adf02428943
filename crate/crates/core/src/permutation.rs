//! Per-epoch permutations: random reshuffling, shuffle-once, incremental,
//! resampling every `m` epochs, and explicit schedules.
//!
//! Indices are 0-based internally and 1-based in text I/O.

use std::fmt;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::descriptor::Descriptor;

pub const PERMUTATION_RNG: &str = "ChaCha20Rng (rand_chacha), seed_from_u64";
pub const SHUFFLE_ALGORITHM: &str = "Fisher-Yates (rand::seq::SliceRandom::shuffle)";

/// Largest `n` accepted by [`all_permutations`].
pub const MAX_ENUMERATION_N: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PermutationStrategy {
    /// Fresh uniform permutation every epoch.
    RandomReshuffle { seed: u64 },
    /// One uniform permutation reused for all epochs.
    ShuffleOnce { seed: u64 },
    /// Fixed deterministic order; `None` is the identity.
    Incremental { order: Option<Vec<usize>> },
    /// Resample every `m` epochs; `m = usize::MAX` never resamples after the first.
    EveryM { m: usize, seed: u64 },
    /// One explicit permutation per epoch.
    FixedSchedule { perms: Vec<Vec<usize>> },
}

impl PermutationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PermutationStrategy::RandomReshuffle { .. } => "rr",
            PermutationStrategy::ShuffleOnce { .. } => "so",
            PermutationStrategy::Incremental { .. } => "ig",
            PermutationStrategy::EveryM { .. } => "every-m",
            PermutationStrategy::FixedSchedule { .. } => "fixed",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            PermutationStrategy::RandomReshuffle { seed }
            | PermutationStrategy::ShuffleOnce { seed }
            | PermutationStrategy::EveryM { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    /// Same strategy with a different seed (no-op for deterministic variants).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            PermutationStrategy::RandomReshuffle { seed: s }
            | PermutationStrategy::ShuffleOnce { seed: s }
            | PermutationStrategy::EveryM { seed: s, .. } => *s = seed,
            _ => {}
        }
        out
    }

    pub fn is_random(&self) -> bool {
        self.seed().is_some()
    }

    /// Starts a stream over `[n]`, validating explicit orders.
    pub fn stream(&self, n: usize) -> Result<PermutationStream> {
        if n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        match self {
            PermutationStrategy::Incremental { order: Some(order) } => check_bijection(order, n)?,
            PermutationStrategy::FixedSchedule { perms } => {
                for p in perms {
                    check_bijection(p, n)?;
                }
            }
            PermutationStrategy::EveryM { m: 0, .. } => {
                return Err(Error::invalid("EveryM needs m >= 1"));
            }
            _ => {}
        }
        Ok(PermutationStream {
            strategy: self.clone(),
            rng: ChaCha20Rng::seed_from_u64(self.seed().unwrap_or(0)),
            current: (0..n).collect(),
            last_epoch: 0,
        })
    }

    /// Canonical text form (`fixed` lists only its epoch count).
    pub fn descriptor_string(&self) -> String {
        match self {
            PermutationStrategy::RandomReshuffle { seed } => format!("rr seed={seed}"),
            PermutationStrategy::ShuffleOnce { seed } => format!("so seed={seed}"),
            PermutationStrategy::Incremental { order: None } => "ig".to_string(),
            PermutationStrategy::Incremental { order: Some(o) } => {
                format!("ig order={}", o.iter().map(|i| i + 1).join(","))
            }
            PermutationStrategy::EveryM { m, seed } => {
                if *m == usize::MAX {
                    format!("every-m m=inf seed={seed}")
                } else {
                    format!("every-m m={m} seed={seed}")
                }
            }
            PermutationStrategy::FixedSchedule { perms } => {
                format!("fixed epochs={}", perms.len())
            }
        }
    }

    /// Parses `rr seed=S`, `so seed=S`, `ig [order=1,3,2]`, `every-m m=M|inf seed=S`.
    ///
    /// A missing seed falls back to `default_seed`. Fixed schedules come from
    /// files, see [`read_schedule`].
    pub fn parse(text: &str, default_seed: u64) -> Result<Self> {
        let desc = Descriptor::parse(text)?;
        let seed = desc.get_u64("seed")?.unwrap_or(default_seed);
        let out = match desc.name.as_str() {
            "rr" | "random-reshuffle" => PermutationStrategy::RandomReshuffle { seed },
            "so" | "shuffle-once" => PermutationStrategy::ShuffleOnce { seed },
            "ig" | "incremental" => {
                let order = match desc.get_str("order") {
                    None => None,
                    Some(list) => Some(parse_one_based(list)?),
                };
                PermutationStrategy::Incremental { order }
            }
            "every-m" | "everym" => {
                let m = match desc.get_str("m") {
                    Some("inf") => usize::MAX,
                    Some(v) => v
                        .parse()
                        .map_err(|e| Error::parse("every-m", format!("m='{v}': {e}")))?,
                    None => return Err(Error::parse("every-m", "missing m")),
                };
                PermutationStrategy::EveryM { m, seed }
            }
            other => {
                return Err(Error::parse("permutation", format!("unknown strategy '{other}'")))
            }
        };
        desc.ensure_consumed()?;
        Ok(out)
    }
}

impl fmt::Display for PermutationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor_string())
    }
}

/// Stateful generator; epochs must be requested as `1, 2, 3, ...`.
#[derive(Debug, Clone)]
pub struct PermutationStream {
    strategy: PermutationStrategy,
    rng: ChaCha20Rng,
    current: Vec<usize>,
    last_epoch: usize,
}

impl PermutationStream {
    pub fn n(&self) -> usize {
        self.current.len()
    }

    pub fn next_permutation(&mut self, k: usize) -> Result<&[usize]> {
        if k != self.last_epoch + 1 {
            return Err(Error::OutOfOrder { expected: self.last_epoch + 1, got: k });
        }
        let n = self.current.len();
        match &self.strategy {
            PermutationStrategy::RandomReshuffle { .. } => self.reshuffle(),
            PermutationStrategy::ShuffleOnce { .. } => {
                if k == 1 {
                    self.reshuffle();
                }
            }
            PermutationStrategy::EveryM { m, .. } => {
                if (k - 1) % m == 0 {
                    self.reshuffle();
                }
            }
            PermutationStrategy::Incremental { order } => {
                if k == 1 {
                    if let Some(o) = order {
                        self.current.clone_from(o);
                    }
                }
            }
            PermutationStrategy::FixedSchedule { perms } => {
                let p = perms.get(k - 1).ok_or(Error::ScheduleExhausted { epoch: k })?;
                debug_assert_eq!(p.len(), n);
                self.current.clone_from(p);
            }
        }
        self.last_epoch = k;
        Ok(&self.current)
    }

    fn reshuffle(&mut self) {
        for (i, slot) in self.current.iter_mut().enumerate() {
            *slot = i;
        }
        self.current.shuffle(&mut self.rng);
    }
}

pub fn is_bijection(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &i in perm {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

fn check_bijection(perm: &[usize], n: usize) -> Result<()> {
    if is_bijection(perm, n) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{:?} is not a permutation of [{n}]",
            perm.iter().map(|i| i + 1).collect::<Vec<_>>()
        )))
    }
}

/// All `n!` permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    if n > MAX_ENUMERATION_N {
        return Err(Error::invalid(format!(
            "exhaustive enumeration is limited to n <= {MAX_ENUMERATION_N} (got {n})"
        )));
    }
    Ok((0..n).permutations(n).collect())
}

/// `k` independent uniform permutations, e.g. as a stress schedule.
pub fn random_fixed_schedule(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect()
}

fn parse_one_based(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let i: usize = t
                .parse()
                .map_err(|e| Error::parse("permutation", format!("'{t}': {e}")))?;
            if i == 0 {
                return Err(Error::parse("permutation", "indices are 1-based"));
            }
            Ok(i - 1)
        })
        .collect()
}

/// Reads one 1-based permutation per line; blank lines and `#` comments are skipped.
pub fn read_schedule(text: &str) -> Result<Vec<Vec<usize>>> {
    let perms: Vec<Vec<usize>> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(parse_one_based)
        .collect::<Result<_>>()?;
    if let Some(first) = perms.first() {
        let n = first.len();
        for (k, p) in perms.iter().enumerate() {
            if !is_bijection(p, n) {
                return Err(Error::parse(
                    "permutation schedule",
                    format!("line {} is not a permutation of [{n}]", k + 1),
                ));
            }
        }
    }
    Ok(perms)
}

pub fn write_schedule(perms: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for p in perms {
        out.push_str(&p.iter().map(|i| i + 1).join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn take(strategy: &PermutationStrategy, n: usize, epochs: usize) -> Vec<Vec<usize>> {
        let mut s = strategy.stream(n).unwrap();
        (1..=epochs).map(|k| s.next_permutation(k).unwrap().to_vec()).collect()
    }

    #[test]
    fn incremental_is_fixed() {
        let perms = take(&PermutationStrategy::Incremental { order: None }, 4, 5);
        assert!(perms.iter().all(|p| p == &vec![0, 1, 2, 3]));
        let order = vec![2, 0, 1];
        let perms = take(&PermutationStrategy::Incremental { order: Some(order.clone()) }, 3, 3);
        assert!(perms.iter().all(|p| p == &order));
    }

    #[test]
    fn shuffle_once_repeats() {
        let perms = take(&PermutationStrategy::ShuffleOnce { seed: 7 }, 10, 37);
        assert_eq!(perms[0], perms[36]);
    }

    #[test]
    fn rr_uniform_frequencies() {
        let epochs = 100_000;
        let perms = take(&PermutationStrategy::RandomReshuffle { seed: 2024 }, 3, epochs);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for p in perms {
            *counts.entry(p).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (p, c) in counts {
            let freq = c as f64 / epochs as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.01, "{p:?}: {freq}");
        }
    }

    #[test]
    fn every_m_limits() {
        let rr = take(&PermutationStrategy::RandomReshuffle { seed: 5 }, 6, 50);
        let m1 = take(&PermutationStrategy::EveryM { m: 1, seed: 5 }, 6, 50);
        assert_eq!(rr, m1);
        let so = take(&PermutationStrategy::ShuffleOnce { seed: 5 }, 6, 50);
        let minf = take(&PermutationStrategy::EveryM { m: usize::MAX, seed: 5 }, 6, 50);
        assert_eq!(so, minf);
        let m3 = take(&PermutationStrategy::EveryM { m: 3, seed: 5 }, 6, 9);
        assert_eq!(m3[0], m3[2]);
        assert_eq!(m3[3], m3[5]);
        assert_eq!(m3[0], rr[0]);
        assert_eq!(m3[3], rr[1]);
    }

    #[test]
    fn fixed_schedule_exhausts() {
        let perms = vec![vec![1, 0], vec![0, 1]];
        let mut s = PermutationStrategy::FixedSchedule { perms }.stream(2).unwrap();
        assert_eq!(s.next_permutation(1).unwrap(), &[1, 0]);
        assert_eq!(s.next_permutation(2).unwrap(), &[0, 1]);
        assert!(matches!(s.next_permutation(3), Err(Error::ScheduleExhausted { epoch: 3 })));
    }

    #[test]
    fn out_of_order_rejected() {
        let mut s = PermutationStrategy::RandomReshuffle { seed: 1 }.stream(3).unwrap();
        assert!(matches!(s.next_permutation(2), Err(Error::OutOfOrder { .. })));
        s.next_permutation(1).unwrap();
        assert!(s.next_permutation(1).is_err());
    }

    #[test]
    fn invalid_orders_rejected() {
        let bad = PermutationStrategy::Incremental { order: Some(vec![0, 0, 1]) };
        assert!(bad.stream(3).is_err());
        assert!(PermutationStrategy::EveryM { m: 0, seed: 1 }.stream(3).is_err());
        let fixed = PermutationStrategy::FixedSchedule { perms: vec![vec![0, 1]] };
        assert!(fixed.stream(3).is_err());
    }

    #[test]
    fn enumeration() {
        assert_eq!(all_permutations(1).unwrap(), vec![vec![0]]);
        let three = all_permutations(3).unwrap();
        assert_eq!(
            three,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        let five = all_permutations(5).unwrap();
        assert_eq!(five.len(), 120);
        assert_eq!(five.iter().unique().count(), 120);
        assert!(five.iter().all(|p| is_bijection(p, 5)));
        assert!(all_permutations(9).is_err());
    }

    #[test]
    fn schedule_text_round_trip() {
        let perms = random_fixed_schedule(5, 4, 3);
        let text = write_schedule(&perms);
        assert!(text.lines().next().unwrap().split(' ').all(|t| t != "0"));
        assert_eq!(read_schedule(&text).unwrap(), perms);
        assert!(read_schedule("1 2\n2 2\n").is_err());
        assert!(read_schedule("0 1\n").is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in [
            PermutationStrategy::RandomReshuffle { seed: 3 },
            PermutationStrategy::ShuffleOnce { seed: 4 },
            PermutationStrategy::Incremental { order: None },
            PermutationStrategy::Incremental { order: Some(vec![1, 0, 2]) },
            PermutationStrategy::EveryM { m: 4, seed: 9 },
            PermutationStrategy::EveryM { m: usize::MAX, seed: 9 },
        ] {
            assert_eq!(PermutationStrategy::parse(&s.descriptor_string(), 0).unwrap(), s);
        }
        assert_eq!(
            PermutationStrategy::parse("rr", 42).unwrap(),
            PermutationStrategy::RandomReshuffle { seed: 42 }
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn strategies() -> impl Strategy<Value = PermutationStrategy> {
            prop_oneof![
                any::<u64>().prop_map(|seed| PermutationStrategy::RandomReshuffle { seed }),
                any::<u64>().prop_map(|seed| PermutationStrategy::ShuffleOnce { seed }),
                (1usize..5, any::<u64>())
                    .prop_map(|(m, seed)| PermutationStrategy::EveryM { m, seed }),
                Just(PermutationStrategy::Incremental { order: None }),
            ]
        }

        proptest! {
            #[test]
            fn outputs_are_bijections_and_reproducible(
                strategy in strategies(),
                n in 1usize..30,
            ) {
                let a = take(&strategy, n, 12);
                let b = take(&strategy, n, 12);
                prop_assert_eq!(&a, &b);
                for p in &a {
                    prop_assert!(is_bijection(p, n));
                    prop_assert_eq!(p.iter().map(|i| i + 1).sum::<usize>(), n * (n + 1) / 2);
                }
            }
        }
    }
}
