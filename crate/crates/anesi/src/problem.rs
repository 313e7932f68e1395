//! Discrete problem structure: world and output spaces, beliefs produced by
//! perception, symbolic functions, and exact enumeration oracles for weighted
//! model counting on small spaces.

use thiserror::Error;

/// Probabilities are clamped to at least this before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Hard ceiling on the number of worlds the exact oracles will enumerate.
pub const MAX_ENUM_WORLDS: u128 = 10_000_000;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid space: {0}")]
    InvalidSpace(String),
    #[error("invalid belief: {0}")]
    InvalidBelief(String),
    #[error("assignment out of range: {0}")]
    BadAssignment(String),
    #[error("world space too large to enumerate ({0} worlds)")]
    EnumerationTooLarge(u128),
    #[error("output {0:?} is unreachable under the given belief")]
    UnreachableOutput(Vec<usize>),
}

/// An ordered list of categorical variable cardinalities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceSpec {
    cards: Vec<usize>,
}

impl SpaceSpec {
    pub fn new(cards: Vec<usize>) -> Result<Self, ProblemError> {
        if cards.is_empty() {
            return Err(ProblemError::InvalidSpace("no variables".into()));
        }
        if cards.iter().any(|&c| c == 0) {
            return Err(ProblemError::InvalidSpace("zero cardinality".into()));
        }
        Ok(Self { cards })
    }

    pub fn uniform(num_vars: usize, card: usize) -> Self {
        Self::new(vec![card; num_vars]).expect("positive dimensions")
    }

    pub fn num_vars(&self) -> usize {
        self.cards.len()
    }

    pub fn card(&self, var: usize) -> usize {
        self.cards[var]
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn num_worlds(&self) -> u128 {
        self.cards.iter().map(|&c| c as u128).product()
    }

    /// Width of the concatenated one-hot encoding of a full assignment.
    pub fn onehot_width(&self) -> usize {
        self.cards.iter().sum()
    }

    pub fn contains(&self, assignment: &[usize]) -> bool {
        assignment.len() == self.cards.len()
            && assignment.iter().zip(&self.cards).all(|(v, c)| v < c)
    }

    /// Lexicographic enumeration, last variable changing fastest.
    pub fn worlds(&self) -> WorldIter<'_> {
        WorldIter {
            cards: &self.cards,
            next: Some(vec![0; self.cards.len()]),
        }
    }

    /// One-hot encode `assignment.len()` leading variables into `out`,
    /// leaving the remaining positions zero. `out` must already be zeroed
    /// and `onehot_width` long.
    pub fn encode_prefix(&self, assignment: &[usize], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.onehot_width());
        debug_assert!(assignment.len() <= self.cards.len());
        let mut off = 0;
        for (i, &v) in assignment.iter().enumerate() {
            debug_assert!(v < self.cards[i]);
            out[off + v] = 1.0;
            off += self.cards[i];
        }
    }
}

pub struct WorldIter<'a> {
    cards: &'a [usize],
    next: Option<Vec<usize>>,
}

impl Iterator for WorldIter<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        for i in (0..succ.len()).rev() {
            succ[i] += 1;
            if succ[i] < self.cards[i] {
                self.next = Some(succ);
                break;
            }
            succ[i] = 0;
        }
        Some(current)
    }
}

/// A full assignment to the world variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct World(pub Vec<usize>);

/// A full assignment to the output variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Output(pub Vec<usize>);

/// Independent categorical distributions, one row per world variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    cards: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl Belief {
    pub fn new(space: &SpaceSpec, rows: Vec<Vec<f64>>) -> Result<Self, ProblemError> {
        if rows.len() != space.num_vars() {
            return Err(ProblemError::InvalidBelief(format!(
                "{} rows for {} variables",
                rows.len(),
                space.num_vars()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != space.card(i) {
                return Err(ProblemError::InvalidBelief(format!(
                    "row {i} has {} entries, cardinality is {}",
                    row.len(),
                    space.card(i)
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(ProblemError::InvalidBelief(format!(
                    "row {i} has negative or non-finite mass"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(ProblemError::InvalidBelief(format!(
                    "row {i} sums to {s}"
                )));
            }
        }
        Ok(Self {
            cards: space.cards().to_vec(),
            rows,
        })
    }

    pub fn uniform(space: &SpaceSpec) -> Self {
        let rows = space
            .cards()
            .iter()
            .map(|&c| vec![1.0 / c as f64; c])
            .collect();
        Self {
            cards: space.cards().to_vec(),
            rows,
        }
    }

    /// All mass on one world.
    pub fn delta(space: &SpaceSpec, world: &World) -> Self {
        let rows = world
            .0
            .iter()
            .zip(space.cards())
            .map(|(&v, &c)| {
                let mut row = vec![0.0; c];
                row[v] = 1.0;
                row
            })
            .collect();
        Self {
            cards: space.cards().to_vec(),
            rows,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.rows.len()
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn row(&self, var: usize) -> &[f64] {
        &self.rows[var]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Row-major concatenation of all rows.
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn flat_len(&self) -> usize {
        self.cards.iter().sum()
    }

    /// Probability of `world` under the independent rows.
    pub fn world_prob(&self, world: &[usize]) -> f64 {
        self.rows
            .iter()
            .zip(world)
            .map(|(row, &v)| row[v])
            .product()
    }
}

/// A deterministic map from worlds to structured outputs.
pub trait SymbolicFn {
    fn world_space(&self) -> &SpaceSpec;
    fn output_space(&self) -> &SpaceSpec;
    fn apply(&self, world: &World) -> Output;
}

/// `sum_i log max(P_i[w_i], 1e-12)`.
pub fn world_log_prob(belief: &Belief, world: &World) -> Result<f64, ProblemError> {
    if world.0.len() != belief.num_vars() {
        return Err(ProblemError::BadAssignment(format!(
            "{} values for {} variables",
            world.0.len(),
            belief.num_vars()
        )));
    }
    let mut total = 0.0;
    for (i, &v) in world.0.iter().enumerate() {
        if v >= belief.cards()[i] {
            return Err(ProblemError::BadAssignment(format!(
                "value {v} at variable {i}"
            )));
        }
        total += belief.row(i)[v].max(LOG_CLAMP).ln();
    }
    Ok(total)
}

fn guard_enum(space: &SpaceSpec) -> Result<(), ProblemError> {
    let n = space.num_worlds();
    if n > MAX_ENUM_WORLDS {
        return Err(ProblemError::EnumerationTooLarge(n));
    }
    Ok(())
}

/// Exact weighted model count `sum_{w : c(w) = y} p(w)` by full enumeration.
pub fn exact_wmc(belief: &Belief, c: &dyn SymbolicFn, y: &Output) -> Result<f64, ProblemError> {
    guard_enum(c.world_space())?;
    let mut total = 0.0;
    for w in c.world_space().worlds() {
        let world = World(w);
        if c.apply(&world) == *y {
            total += belief.world_prob(&world.0);
        }
    }
    Ok(total)
}

/// Exact posterior `p(w | c(w) = y)` as `(world, probability)` pairs in
/// enumeration order; probabilities sum to 1.
pub fn exact_posterior(
    belief: &Belief,
    c: &dyn SymbolicFn,
    y: &Output,
) -> Result<Vec<(World, f64)>, ProblemError> {
    guard_enum(c.world_space())?;
    let mut entries = Vec::new();
    let mut total = 0.0;
    for w in c.world_space().worlds() {
        let world = World(w);
        if c.apply(&world) == *y {
            let p = belief.world_prob(&world.0);
            total += p;
            entries.push((world, p));
        }
    }
    if total <= 0.0 {
        return Err(ProblemError::UnreachableOutput(y.0.clone()));
    }
    for (_, p) in entries.iter_mut() {
        *p /= total;
    }
    Ok(entries)
}

/// Ancestral draw from the fully-factorized belief: one categorical sample
/// per variable.
pub fn sample_world(belief: &Belief, rng: &mut impl rand::Rng) -> World {
    let digits = belief
        .rows()
        .iter()
        .map(|row| {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            for (i, p) in row.iter().enumerate() {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            row.len() - 1
        })
        .collect();
    World(digits)
}

/// Most probable explanation: posterior argmax, first in lexicographic order
/// on ties.
pub fn exact_mpe(belief: &Belief, c: &dyn SymbolicFn, y: &Output) -> Result<World, ProblemError> {
    let posterior = exact_posterior(belief, c, y)?;
    let mut best: Option<(World, f64)> = None;
    for (w, p) in posterior {
        match &best {
            Some((_, bp)) if p <= *bp => {}
            _ => best = Some((w, p)),
        }
    }
    Ok(best.expect("posterior is non-empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two digits, output is their sum as (carry, units).
    pub struct DigitSum;

    impl SymbolicFn for DigitSum {
        fn world_space(&self) -> &SpaceSpec {
            static SPACE: std::sync::OnceLock<SpaceSpec> = std::sync::OnceLock::new();
            SPACE.get_or_init(|| SpaceSpec::uniform(2, 10))
        }
        fn output_space(&self) -> &SpaceSpec {
            static SPACE: std::sync::OnceLock<SpaceSpec> = std::sync::OnceLock::new();
            SPACE.get_or_init(|| SpaceSpec::new(vec![2, 10]).unwrap())
        }
        fn apply(&self, world: &World) -> Output {
            let s = world.0[0] + world.0[1];
            Output(vec![s / 10, s % 10])
        }
    }

    #[test]
    fn world_iteration_is_lexicographic() {
        let space = SpaceSpec::new(vec![2, 3]).unwrap();
        let all: Vec<_> = space.worlds().collect();
        assert_eq!(
            all,
            vec![
                vec![0, 0],
                vec![0, 1],
                vec![0, 2],
                vec![1, 0],
                vec![1, 1],
                vec![1, 2]
            ]
        );
    }

    #[test]
    fn uniform_belief_wmc_of_thirteen_is_six_percent() {
        let belief = Belief::uniform(DigitSum.world_space());
        let wmc = exact_wmc(&belief, &DigitSum, &Output(vec![1, 3])).unwrap();
        assert!((wmc - 0.06).abs() < 1e-12);
    }

    #[test]
    fn uniform_belief_mpe_breaks_ties_lexicographically() {
        let belief = Belief::uniform(DigitSum.world_space());
        let mpe = exact_mpe(&belief, &DigitSum, &Output(vec![1, 3])).unwrap();
        assert_eq!(mpe, World(vec![4, 9]));
    }

    #[test]
    fn skewed_belief_moves_the_mpe() {
        // favor digit 9 in slot 2: (4, 9) should win among sums to 13
        let space = DigitSum.world_space();
        let mut rows = vec![vec![0.1; 10], vec![0.05; 10]];
        rows[1][9] = 0.55;
        let belief = Belief::new(space, rows).unwrap();
        let mpe = exact_mpe(&belief, &DigitSum, &Output(vec![1, 3])).unwrap();
        assert_eq!(mpe, World(vec![4, 9]));
    }

    #[test]
    fn posterior_of_thirteen_is_uniform_over_six_worlds() {
        let belief = Belief::uniform(DigitSum.world_space());
        let post = exact_posterior(&belief, &DigitSum, &Output(vec![1, 3])).unwrap();
        assert_eq!(post.len(), 6);
        assert_eq!(post[0].0, World(vec![4, 9]));
        for (_, p) in &post {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_output_is_an_error() {
        let belief = Belief::uniform(DigitSum.world_space());
        // 9 + 9 = 18 is the largest sum, so 19 is unreachable
        let err = exact_posterior(&belief, &DigitSum, &Output(vec![1, 9]));
        assert!(matches!(err, Err(ProblemError::UnreachableOutput(_))));
    }

    #[test]
    fn uniform_world_log_prob_matches_closed_form() {
        let space = SpaceSpec::uniform(2, 10);
        let belief = Belief::uniform(&space);
        let lp = world_log_prob(&belief, &World(vec![3, 7])).unwrap();
        assert!((lp - 2.0 * (0.1f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_world_is_clamped_not_infinite() {
        let space = SpaceSpec::uniform(1, 2);
        let belief = Belief::new(&space, vec![vec![1.0, 0.0]]).unwrap();
        let lp = world_log_prob(&belief, &World(vec![1])).unwrap();
        assert!((lp - LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn enumeration_guard_trips() {
        struct Huge(SpaceSpec, SpaceSpec);
        impl SymbolicFn for Huge {
            fn world_space(&self) -> &SpaceSpec {
                &self.0
            }
            fn output_space(&self) -> &SpaceSpec {
                &self.1
            }
            fn apply(&self, _: &World) -> Output {
                Output(vec![0])
            }
        }
        let huge = Huge(SpaceSpec::uniform(8, 10), SpaceSpec::uniform(1, 2));
        let belief = Belief::uniform(&huge.0);
        assert!(matches!(
            exact_wmc(&belief, &huge, &Output(vec![0])),
            Err(ProblemError::EnumerationTooLarge(_))
        ));
    }

    #[test]
    fn sample_world_frequencies_match_the_belief() {
        use rand::SeedableRng;
        let space = SpaceSpec::uniform(1, 3);
        let belief = Belief::new(&space, vec![vec![0.2, 0.5, 0.3]]).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let trials = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            counts[sample_world(&belief, &mut rng).0[0]] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let p = belief.row(0)[k];
            let observed = c as f64 / trials as f64;
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!(
                (observed - p).abs() <= 3.0 * se,
                "option {k}: observed {observed}, expected {p}"
            );
        }
    }

    #[test]
    fn belief_validation_rejects_bad_rows() {
        let space = SpaceSpec::uniform(1, 3);
        assert!(Belief::new(&space, vec![vec![0.5, 0.5]]).is_err());
        assert!(Belief::new(&space, vec![vec![0.5, 0.4, 0.2]]).is_err());
        assert!(Belief::new(&space, vec![vec![-0.1, 0.6, 0.5]]).is_err());
        assert!(Belief::new(&space, vec![vec![0.2, 0.3, 0.5]]).is_ok());
    }

    fn arb_belief(cards: Vec<usize>) -> impl Strategy<Value = Belief> {
        let rows: Vec<_> = cards
            .iter()
            .map(|&c| proptest::collection::vec(0.01f64..1.0, c))
            .collect();
        rows.prop_map(move |raw| {
            let space = SpaceSpec::new(cards.clone()).unwrap();
            let rows = raw
                .into_iter()
                .map(|mut row| {
                    let s: f64 = row.iter().sum();
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                    row
                })
                .collect();
            Belief::new(&space, rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn wmc_partitions_unity(belief in arb_belief(vec![10, 10])) {
            let mut total = 0.0;
            for y in DigitSum.output_space().worlds() {
                total += exact_wmc(&belief, &DigitSum, &Output(y)).unwrap();
            }
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn posterior_sums_to_one_and_contains_mpe(belief in arb_belief(vec![10, 10])) {
            let y = Output(vec![1, 3]);
            let post = exact_posterior(&belief, &DigitSum, &y).unwrap();
            let total: f64 = post.iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let mpe = exact_mpe(&belief, &DigitSum, &y).unwrap();
            prop_assert!(post.iter().any(|(w, _)| *w == mpe));
        }

        #[test]
        fn wmc_within_unit_interval(belief in arb_belief(vec![10, 10])) {
            let wmc = exact_wmc(&belief, &DigitSum, &Output(vec![0, 7])).unwrap();
            prop_assert!((0.0..=1.0).contains(&wmc));
        }
    }
}
