//! Symbolic pruners for the addition task: an exact linear-time pruner for
//! both output and world digits, plus a brute-force completion oracle and
//! differential verification machinery.
//!
//! Digit positions are 0-indexed here. The world pruner always receives the
//! complete output (outputs are generated before worlds), while the output
//! pruner sees only the already-generated output prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::infer::PrunerMask;
use crate::problem::Output;

#[derive(Debug, Error)]
pub enum PrunerError {
    #[error("brute-force completion search is limited to N <= 3, got {0}")]
    GuardExceeded(usize),
    #[error("invalid pruner context: {0}")]
    BadContext(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Output,
    World,
}

/// Everything a pruner may inspect when masking variable `var`.
#[derive(Debug, Clone, Copy)]
pub struct PrunerContext<'a> {
    /// Digits per summand.
    pub n: usize,
    /// For world variables: the complete output. For output variables: the
    /// generated prefix `y_{0..var}`.
    pub y: &'a [usize],
    /// Generated world prefix `w_{0..var}` (empty for output variables).
    pub w_prefix: &'a [usize],
    /// Index of the variable being decided.
    pub var: usize,
    pub kind: VarKind,
}

/// Masks options of one variable given the generation context. Outputs are
/// generated before worlds, so `world_mask` always receives a complete `y`.
pub trait Pruner {
    fn output_mask(&self, y_prefix: &[usize], var: usize) -> PrunerMask;
    fn world_mask(&self, y: &[usize], w_prefix: &[usize], var: usize) -> PrunerMask;
}

fn int_of(digits: &[usize]) -> i128 {
    digits.iter().fold(0i128, |acc, &d| acc * 10 + d as i128)
}

fn pow10(e: usize) -> i128 {
    10i128.pow(e as u32)
}

/// Digit `pos` (0-indexed from the most significant) of `value` rendered as
/// `width` digits with leading zeros.
fn nth_digit(value: i128, width: usize, pos: usize) -> usize {
    ((value / pow10(width - 1 - pos)) % 10) as usize
}

/// Exact mask over world digit `var` (0-indexed over the 2N world
/// variables), given the full output `y`.
///
/// For digits of the first summand the admissible region is an interval in
/// the candidate digit; for digits of the second summand the remainder
/// `y - n1` forces the digit outright. Cost is O(N).
pub fn mnistadd_prune_world(ctx: &PrunerContext) -> PrunerMask {
    debug_assert_eq!(ctx.kind, VarKind::World);
    let n = ctx.n;
    debug_assert_eq!(ctx.y.len(), n + 1);
    debug_assert_eq!(ctx.w_prefix.len(), ctx.var);
    debug_assert!(ctx.var < 2 * n);
    let k = ctx.var + 1; // 1-indexed position within the 2N world digits

    if k <= n {
        // deciding digit k of the first summand: accept d iff
        // 0 <= l_k - p_k <= 10^k - s, where p_k includes the candidate,
        // l_k is the first k+1 output digits, and s = 1 iff every output
        // digit after position k+1 is a 9 (vacuously true at k = N).
        let l_k = int_of(&ctx.y[..k + 1]);
        let all_nines = ctx.y[k + 1..].iter().all(|&d| d == 9);
        let s = i128::from(all_nines);
        let hi = pow10(k) - s;
        let p_prefix = int_of(ctx.w_prefix) * 10;
        let bits = (0..10)
            .map(|d| {
                let gap = l_k - (p_prefix + d as i128);
                0 <= gap && gap <= hi
            })
            .collect();
        PrunerMask::from_bits(bits)
    } else {
        // the first summand is complete, so the second is forced to be
        // y - n1 digit by digit; reject everything if the remainder is not
        // an N-digit number or the generated prefix already deviates
        let n1 = int_of(&ctx.w_prefix[..n]);
        let n2 = int_of(ctx.y) - n1;
        if n2 < 0 || n2 >= pow10(n) {
            return PrunerMask::zeros(10);
        }
        let j = k - n; // 1-indexed position within the second summand
        for pos in 0..j - 1 {
            if ctx.w_prefix[n + pos] != nth_digit(n2, n, pos) {
                return PrunerMask::zeros(10);
            }
        }
        PrunerMask::one_hot(10, nth_digit(n2, n, j - 1))
    }
}

/// Exact mask over output digit `var` (0-indexed over the N+1 output
/// variables), given the generated output prefix: digit `d` survives iff
/// some completion of the prefix stays within the attainable sum range
/// `[0, 2*10^N - 2]`.
pub fn mnistadd_prune_output(ctx: &PrunerContext) -> PrunerMask {
    debug_assert_eq!(ctx.kind, VarKind::Output);
    let n = ctx.n;
    debug_assert!(ctx.var < n + 1);
    debug_assert_eq!(ctx.y.len(), ctx.var);
    let card = if ctx.var == 0 { 2 } else { 10 };
    let remaining = n - ctx.var; // digits still open after this one
    let max_sum = 2 * pow10(n) - 2;
    let prefix = int_of(ctx.y) * 10;
    let bits = (0..card)
        .map(|d| (prefix + d as i128) * pow10(remaining) <= max_sum)
        .collect();
    PrunerMask::from_bits(bits)
}

/// The exact Proposition-1-style pruner as a [`Pruner`].
#[derive(Debug, Clone, Copy)]
pub struct MnistAddPruner {
    n: usize,
}

impl MnistAddPruner {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl Pruner for MnistAddPruner {
    fn output_mask(&self, y_prefix: &[usize], var: usize) -> PrunerMask {
        mnistadd_prune_output(&PrunerContext {
            n: self.n,
            y: y_prefix,
            w_prefix: &[],
            var,
            kind: VarKind::Output,
        })
    }

    fn world_mask(&self, y: &[usize], w_prefix: &[usize], var: usize) -> PrunerMask {
        mnistadd_prune_world(&PrunerContext {
            n: self.n,
            y,
            w_prefix,
            var,
            kind: VarKind::World,
        })
    }
}

/// True iff some suffix `w_{k..2N}` completes `w_prefix` so that
/// `n1 + n2` equals the number `y` encodes. Enumerates all suffixes of the
/// summand under construction, so it is only usable for N <= 3.
pub fn completion_exists(n: usize, y: &Output, w_prefix: &[usize]) -> Result<bool, PrunerError> {
    if n > 3 {
        return Err(PrunerError::GuardExceeded(n));
    }
    let k = w_prefix.len();
    if k > 2 * n || y.0.len() != n + 1 {
        return Err(PrunerError::BadContext(format!(
            "prefix length {k}, output length {}",
            y.0.len()
        )));
    }
    let target = int_of(&y.0);
    if k <= n {
        // enumerate completions of the first summand; the second is then a
        // plain range membership test
        let free = n - k;
        let base = int_of(w_prefix) * pow10(free);
        for suffix in 0..pow10(free) {
            let n1 = base + suffix;
            let n2 = target - n1;
            if (0..pow10(n)).contains(&n2) {
                return Ok(true);
            }
        }
        Ok(false)
    } else {
        let n1 = int_of(&w_prefix[..n]);
        let free = 2 * n - k;
        let base = int_of(&w_prefix[n..]) * pow10(free);
        for suffix in 0..pow10(free) {
            let n2 = base + suffix;
            if n1 + n2 == target {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Brute-force pruner backed by [`completion_exists`] (worlds) and full
/// world-pair enumeration (outputs); the differential-testing oracle.
#[derive(Debug, Clone)]
pub struct BruteForcePruner {
    n: usize,
    reachable_outputs: Vec<Vec<usize>>,
}

pub fn brute_force_pruner(n: usize) -> Result<BruteForcePruner, PrunerError> {
    if n > 3 {
        return Err(PrunerError::GuardExceeded(n));
    }
    let mut reachable_outputs = Vec::new();
    for total in 0..=(2 * pow10(n) - 2) {
        let digits: Vec<usize> = (0..=n).map(|pos| nth_digit(total, n + 1, pos)).collect();
        reachable_outputs.push(digits);
    }
    Ok(BruteForcePruner {
        n,
        reachable_outputs,
    })
}

impl Pruner for BruteForcePruner {
    fn output_mask(&self, y_prefix: &[usize], var: usize) -> PrunerMask {
        let card = if var == 0 { 2 } else { 10 };
        let bits = (0..card)
            .map(|d| {
                self.reachable_outputs
                    .iter()
                    .any(|y| y[..var] == *y_prefix && y[var] == d)
            })
            .collect();
        PrunerMask::from_bits(bits)
    }

    fn world_mask(&self, y: &[usize], w_prefix: &[usize], _var: usize) -> PrunerMask {
        let output = Output(y.to_vec());
        let bits = (0..10)
            .map(|d| {
                let mut prefix = w_prefix.to_vec();
                prefix.push(d);
                completion_exists(self.n, &output, &prefix).expect("guarded at construction")
            })
            .collect();
        PrunerMask::from_bits(bits)
    }
}

/// Sound-and-complete pruner for any enumerable symbolic function, by direct
/// search over completions. Only suitable for small spaces.
pub struct ExhaustivePruner<'c> {
    c: &'c dyn crate::problem::SymbolicFn,
}

impl<'c> ExhaustivePruner<'c> {
    pub fn new(c: &'c dyn crate::problem::SymbolicFn) -> Result<Self, PrunerError> {
        if c.world_space().num_worlds() > 1_000_000 {
            return Err(PrunerError::BadContext(
                "world space too large for exhaustive pruning".into(),
            ));
        }
        Ok(Self { c })
    }

    fn extends_to(&self, w_prefix: &[usize], y: &[usize]) -> bool {
        let cards = self.c.world_space().cards();
        let free = &cards[w_prefix.len()..];
        let free_space = match crate::problem::SpaceSpec::new(free.to_vec()) {
            Ok(s) => s,
            Err(_) => {
                // complete assignment: just evaluate
                return self.c.apply(&crate::problem::World(w_prefix.to_vec())).0 == y;
            }
        };
        for suffix in free_space.worlds() {
            let mut w = w_prefix.to_vec();
            w.extend(suffix);
            if self.c.apply(&crate::problem::World(w)).0 == y {
                return true;
            }
        }
        false
    }
}

impl Pruner for ExhaustivePruner<'_> {
    fn output_mask(&self, y_prefix: &[usize], var: usize) -> PrunerMask {
        let card = self.c.output_space().card(var);
        let bits = (0..card)
            .map(|d| {
                self.c.world_space().worlds().any(|w| {
                    let y = self.c.apply(&crate::problem::World(w)).0;
                    y[..var] == *y_prefix && y[var] == d
                })
            })
            .collect();
        PrunerMask::from_bits(bits)
    }

    fn world_mask(&self, y: &[usize], w_prefix: &[usize], var: usize) -> PrunerMask {
        let card = self.c.world_space().card(var);
        let bits = (0..card)
            .map(|d| {
                let mut prefix = w_prefix.to_vec();
                prefix.push(d);
                self.extends_to(&prefix, y)
            })
            .collect();
        PrunerMask::from_bits(bits)
    }
}

/// One mask disagreement between a pruner under test and the oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disagreement {
    pub n: usize,
    pub kind: VarKind,
    pub y: Vec<usize>,
    pub w_prefix: Vec<usize>,
    pub var: usize,
    pub digit: usize,
    pub got: bool,
    pub want: bool,
}

impl std::fmt::Display for Disagreement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "N={} kind={:?} y={:?} w_prefix={:?} var={} digit={}: pruner says {}, oracle says {}",
            self.n, self.kind, self.y, self.w_prefix, self.var, self.digit, self.got, self.want
        )
    }
}

fn enumerate_sequences(cards: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &c in cards {
        let mut next = Vec::with_capacity(out.len() * c);
        for seq in &out {
            for v in 0..c {
                let mut s = seq.clone();
                s.push(v);
                next.push(s);
            }
        }
        out = next;
    }
    out
}

/// Compare `pruner` against the completion oracle on every
/// `(y, w_prefix, digit)` combination, including prefixes no sound sampler
/// would reach. Returns the number of masks checked.
pub fn verify_world_pruner_exhaustive(
    n: usize,
    pruner: &dyn Fn(&PrunerContext) -> PrunerMask,
) -> Result<u64, Box<Disagreement>> {
    let mut cards = vec![2];
    cards.extend(std::iter::repeat(10).take(n));
    let mut checked = 0;
    for y in enumerate_sequences(&cards) {
        for var in 0..2 * n {
            for w_prefix in enumerate_sequences(&vec![10; var]) {
                check_world_case(n, &y, &w_prefix, var, pruner)?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// Randomized version of the same comparison for spaces too large to cover.
pub fn verify_world_pruner_randomized(
    n: usize,
    cases: u64,
    seed: u64,
    pruner: &dyn Fn(&PrunerContext) -> PrunerMask,
) -> Result<u64, Box<Disagreement>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let mut y = vec![rng.gen_range(0..2)];
        y.extend((0..n).map(|_| rng.gen_range(0..10)));
        let var = rng.gen_range(0..2 * n);
        let w_prefix: Vec<usize> = (0..var).map(|_| rng.gen_range(0..10)).collect();
        check_world_case(n, &y, &w_prefix, var, pruner)?;
    }
    Ok(cases)
}

fn check_world_case(
    n: usize,
    y: &[usize],
    w_prefix: &[usize],
    var: usize,
    pruner: &dyn Fn(&PrunerContext) -> PrunerMask,
) -> Result<(), Box<Disagreement>> {
    let ctx = PrunerContext {
        n,
        y,
        w_prefix,
        var,
        kind: VarKind::World,
    };
    let mask = pruner(&ctx);
    let output = Output(y.to_vec());
    for digit in 0..10 {
        let mut probe = w_prefix.to_vec();
        probe.push(digit);
        let want = completion_exists(n, &output, &probe).expect("oracle within guard");
        if mask.allows(digit) != want {
            return Err(Box::new(Disagreement {
                n,
                kind: VarKind::World,
                y: y.to_vec(),
                w_prefix: w_prefix.to_vec(),
                var,
                digit,
                got: mask.allows(digit),
                want,
            }));
        }
    }
    Ok(())
}

/// Compare an output pruner against reachability enumeration on every
/// `(y_prefix, digit)` combination.
pub fn verify_output_pruner_exhaustive(
    n: usize,
    pruner: &dyn Fn(&PrunerContext) -> PrunerMask,
) -> Result<u64, Box<Disagreement>> {
    let oracle = brute_force_pruner(n).expect("oracle within guard");
    let mut cards = vec![2];
    cards.extend(std::iter::repeat(10).take(n));
    let mut checked = 0;
    for var in 0..=n {
        for y_prefix in enumerate_sequences(&cards[..var]) {
            let ctx = PrunerContext {
                n,
                y: &y_prefix,
                w_prefix: &[],
                var,
                kind: VarKind::Output,
            };
            let got = pruner(&ctx);
            let want = oracle.output_mask(&y_prefix, var);
            for digit in 0..got.len().max(want.len()) {
                if got.allows(digit) != want.allows(digit) {
                    return Err(Box::new(Disagreement {
                        n,
                        kind: VarKind::Output,
                        y: y_prefix.clone(),
                        w_prefix: vec![],
                        var,
                        digit,
                        got: got.allows(digit),
                        want: want.allows(digit),
                    }));
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world_ctx<'a>(n: usize, y: &'a [usize], w_prefix: &'a [usize]) -> PrunerContext<'a> {
        PrunerContext {
            n,
            y,
            w_prefix,
            var: w_prefix.len(),
            kind: VarKind::World,
        }
    }

    #[test]
    fn thirteen_prunes_low_first_digits() {
        // 13 needs w1 >= 4: digits 0-3 cannot reach it with a single partner digit
        let mask = mnistadd_prune_world(&world_ctx(1, &[1, 3], &[]));
        let want = [false, false, false, false, true, true, true, true, true, true];
        assert_eq!(mask.bits(), &want);
    }

    #[test]
    fn second_digit_is_forced_given_first() {
        let mask = mnistadd_prune_world(&world_ctx(1, &[1, 3], &[5]));
        assert_eq!(mask, PrunerMask::one_hot(10, 8));
    }

    #[test]
    fn completion_oracle_matches_fig2_cases() {
        let y = Output(vec![1, 3]);
        assert!(completion_exists(1, &y, &[4]).unwrap());
        assert!(!completion_exists(1, &y, &[3]).unwrap());
        assert!(completion_exists(1, &y, &[]).unwrap());
    }

    #[test]
    fn unreachable_output_rejects_everything() {
        // 19 exceeds the maximum sum 18
        let mask = mnistadd_prune_world(&world_ctx(1, &[1, 9], &[]));
        assert!(!mask.any());
    }

    #[test]
    fn trailing_nines_tighten_the_interval() {
        // y = 139: n1 = 4x..9x admit completions, n1 = 3x does not, because
        // the units digit 9 forces the tighter bound
        let mask = mnistadd_prune_world(&world_ctx(2, &[1, 3, 9], &[]));
        let want = [false, false, false, false, true, true, true, true, true, true];
        assert_eq!(mask.bits(), &want);
        // y = 135 keeps 3 alive (35 + 99 completes it)
        let mask = mnistadd_prune_world(&world_ctx(2, &[1, 3, 5], &[]));
        let want = [false, false, false, true, true, true, true, true, true, true];
        assert_eq!(mask.bits(), &want);
    }

    #[test]
    fn inconsistent_second_summand_prefix_rejects_everything() {
        // y = 099, n1 = 50 forces n2 = 49, so a generated leading 7 is dead
        let mask = mnistadd_prune_world(&world_ctx(2, &[0, 9, 9], &[5, 0, 7]));
        assert!(!mask.any());
    }

    #[test]
    fn output_pruner_matches_fig2() {
        let ctx = PrunerContext {
            n: 1,
            y: &[1],
            w_prefix: &[],
            var: 1,
            kind: VarKind::Output,
        };
        let mask = mnistadd_prune_output(&ctx);
        // carry 1: sums 10..18 are attainable, 19 is not
        let want = [true, true, true, true, true, true, true, true, true, false];
        assert_eq!(mask.bits(), &want);

        let ctx = PrunerContext {
            n: 1,
            y: &[0],
            w_prefix: &[],
            var: 1,
            kind: VarKind::Output,
        };
        assert_eq!(mnistadd_prune_output(&ctx), PrunerMask::all_ones(10));
    }

    #[test]
    fn brute_force_reproduces_the_world_examples() {
        let oracle = brute_force_pruner(1).unwrap();
        let mask = oracle.world_mask(&[1, 3], &[], 0);
        assert_eq!(
            mask.bits(),
            &[false, false, false, false, true, true, true, true, true, true]
        );
        assert_eq!(oracle.world_mask(&[1, 3], &[5], 1), PrunerMask::one_hot(10, 8));
        // unconstrained position: first digit for y = 09 admits everything
        assert_eq!(oracle.world_mask(&[0, 9], &[], 0), PrunerMask::all_ones(10));
    }

    #[test]
    fn exhaustive_agreement_n1() {
        let checked = verify_world_pruner_exhaustive(1, &|ctx| mnistadd_prune_world(ctx))
            .unwrap_or_else(|d| panic!("disagreement: {d}"));
        assert_eq!(checked, 20 * (1 + 10));
        verify_output_pruner_exhaustive(1, &|ctx| mnistadd_prune_output(ctx))
            .unwrap_or_else(|d| panic!("disagreement: {d}"));
    }

    #[test]
    fn exhaustive_agreement_n2() {
        verify_world_pruner_exhaustive(2, &|ctx| mnistadd_prune_world(ctx))
            .unwrap_or_else(|d| panic!("disagreement: {d}"));
        verify_output_pruner_exhaustive(2, &|ctx| mnistadd_prune_output(ctx))
            .unwrap_or_else(|d| panic!("disagreement: {d}"));
    }

    #[test]
    fn randomized_agreement_n3() {
        verify_world_pruner_randomized(3, 20_000, 7, &|ctx| mnistadd_prune_world(ctx))
            .unwrap_or_else(|d| panic!("disagreement: {d}"));
    }

    #[test]
    fn off_by_one_mutant_is_caught() {
        // widen the acceptance interval by one: a classic boundary slip
        let mutant = |ctx: &PrunerContext| -> PrunerMask {
            if ctx.var < ctx.n {
                let k = ctx.var + 1;
                let l_k = int_of(&ctx.y[..k + 1]);
                let all_nines = ctx.y[k + 1..].iter().all(|&d| d == 9);
                let hi = pow10(k) - i128::from(all_nines) + 1;
                let p_prefix = int_of(ctx.w_prefix) * 10;
                PrunerMask::from_bits(
                    (0..10)
                        .map(|d| {
                            let gap = l_k - (p_prefix + d as i128);
                            0 <= gap && gap <= hi
                        })
                        .collect(),
                )
            } else {
                mnistadd_prune_world(ctx)
            }
        };
        let result = verify_world_pruner_exhaustive(1, &mutant);
        let disagreement = result.expect_err("mutant must be caught");
        assert_eq!(disagreement.kind, VarKind::World);
        assert!(disagreement.got && !disagreement.want);
    }

    #[test]
    fn exhaustive_pruner_agrees_with_addition_pruner() {
        let task = crate::tasks::AdditionTask::new(1);
        let generic = ExhaustivePruner::new(&task).unwrap();
        let exact = MnistAddPruner::new(1);
        for y0 in 0..2 {
            for y1 in 0..10 {
                let y = [y0, y1];
                assert_eq!(generic.world_mask(&y, &[], 0), exact.world_mask(&y, &[], 0));
                for w0 in 0..10 {
                    assert_eq!(
                        generic.world_mask(&y, &[w0], 1),
                        exact.world_mask(&y, &[w0], 1)
                    );
                }
            }
            assert_eq!(generic.output_mask(&[y0], 1), exact.output_mask(&[y0], 1));
        }
        assert_eq!(generic.output_mask(&[], 0), exact.output_mask(&[], 0));
    }

    #[test]
    fn exhaustive_pruner_handles_boolean_disjunction() {
        let task =
            crate::tasks::boolean_constraint_task(2, crate::tasks::BoolFormula::Disjunction)
                .unwrap();
        let pruner = ExhaustivePruner::new(&task).unwrap();
        // y = 1 with first variable 0: second variable must be 1
        assert_eq!(
            pruner.world_mask(&[1], &[0], 1),
            PrunerMask::from_bits(vec![false, true])
        );
        // y = 0 forces every variable to 0
        assert_eq!(
            pruner.world_mask(&[0], &[], 0),
            PrunerMask::from_bits(vec![true, false])
        );
        // both outputs reachable
        assert_eq!(pruner.output_mask(&[], 0), PrunerMask::all_ones(2));
    }

    #[test]
    fn guard_rejects_large_n() {
        assert!(matches!(
            completion_exists(4, &Output(vec![0; 5]), &[]),
            Err(PrunerError::GuardExceeded(4))
        ));
        assert!(brute_force_pruner(4).is_err());
    }

    #[test]
    fn per_decision_cost_grows_modestly_with_n() {
        let time_per_decision = |n: usize| {
            let y: Vec<usize> = std::iter::once(1)
                .chain((0..n).map(|i| (i * 3 + 5) % 10))
                .collect();
            let w_prefix: Vec<usize> = (0..n).map(|i| (i * 7 + 2) % 10).collect();
            let start = std::time::Instant::now();
            let reps = 20_000;
            for _ in 0..reps {
                let ctx = world_ctx(n, &y, &w_prefix[..n.min(w_prefix.len())]);
                std::hint::black_box(mnistadd_prune_world(&ctx));
            }
            start.elapsed().as_secs_f64() / reps as f64
        };
        let t1 = time_per_decision(1);
        let t15 = time_per_decision(15);
        // O(N) predicts ~15x; leave generous headroom for timer noise
        assert!(
            t15 < t1 * 100.0 + 5e-6,
            "t1 = {t1:.3e}s, t15 = {t15:.3e}s"
        );
    }
}
