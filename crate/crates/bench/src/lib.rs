//! Benchmark-only crate; see `benches/kernels.rs`.

use iwgvem::simstudy::{self, CorrelationBand, ItemStructure};
use iwgvem::{Mode, ResponseMatrix, StudyDesign, TrueModel};

/// A reproducible dataset at simulation-study scale: N persons, K = 2, 30 items.
pub fn dataset(n: usize, structure: ItemStructure) -> (ResponseMatrix, TrueModel) {
    let design = StudyDesign::new(n, 2, structure, CorrelationBand::LOW, Mode::Confirmatory);
    simstudy::generate_dataset(&design, 17).expect("valid design")
}
