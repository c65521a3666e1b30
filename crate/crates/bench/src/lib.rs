//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use counsel_core::corpus::IncisionType;
use counsel_core::eligibility::EligibilityInputs;
use counsel_core::stats::ContingencyTable;
use counsel_core::synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Table with every margin positive.
pub fn random_table(rng: &mut impl Rng, rows: usize, cols: usize, max: u64) -> ContingencyTable {
    let counts = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(1..=max)).collect()).collect();
    ContingencyTable::new(
        (0..rows).map(|r| format!("r{r}")).collect(),
        (0..cols).map(|c| format!("c{c}")).collect(),
        counts,
    )
    .expect("valid shape")
}

pub fn random_inputs(rng: &mut impl Rng) -> EligibilityInputs {
    const INCISIONS: [IncisionType; 5] = [
        IncisionType::LowTransverse,
        IncisionType::Classical,
        IncisionType::TShaped,
        IncisionType::JShaped,
        IncisionType::Unknown,
    ];
    let n = rng.random_range(0..5u32);
    EligibilityInputs {
        n_prior_cesareans: n,
        incision_types: (0..n).map(|_| INCISIONS[rng.random_range(0..INCISIONS.len())]).collect(),
        has_prior_vaginal_birth: rng.random_bool(0.3),
        has_prior_vbac: rng.random_bool(0.1),
        interdelivery_interval_days: rng.random_bool(0.8).then(|| rng.random_range(200..3000)),
        has_history_data: rng.random_bool(0.95),
    }
}

pub fn corpus(n_rcs: usize, n_vbac: usize) -> SyntheticCorpus {
    generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_rcs,
        n_vbac,
        ..Default::default()
    })
    .expect("valid spec")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid() {
        let mut r = rng(1);
        let t = random_table(&mut r, 7, 2, 50);
        assert!(t.row_totals().iter().all(|&x| x > 0));
        let inputs = random_inputs(&mut r);
        assert_eq!(inputs.incision_types.len() as u32, inputs.n_prior_cesareans);
        assert_eq!(corpus(3, 2).records.len(), 5);
    }
}
