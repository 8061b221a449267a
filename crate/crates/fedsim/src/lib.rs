//! A deterministic federated-learning simulator for studying out-of-
//! distribution backdoor attacks and batch-norm-statistics defenses.
//!
//! The crate builds a small manual-gradient MLP with batch normalization,
//! synthetic Gaussian-mixture data, client-side attacks (plain OOD poisoning
//! and its stealthy regularized variant), a suite of server-side aggregation
//! defenses, and a round-orchestration engine whose outputs are a pure
//! function of the experiment configuration.
//!
//! Entry points:
//! - [`engine::run_experiment`] runs a configured experiment end to end.
//! - [`config::parse_config`] reads TOML experiment files.
//! - The `fedsim` binary exposes `run`, `sweep`, `report`, and `gen-data`.
//!
//! ```
//! use fedsim::engine::{run_experiment, Attack, Defense, ExperimentConfig};
//!
//! let cfg = ExperimentConfig {
//!     n_clients: 5,
//!     rounds: 1,
//!     attack: Attack::None,
//!     defense: Defense::Fedavg,
//!     data: fedsim::engine::DataConfig {
//!         classes: 4,
//!         input_dim: 8,
//!         train_per_class: 50,
//!         test_per_class: 10,
//!         ood_pool: 50,
//!         ood_test: 20,
//!         spread: 1.0,
//!     },
//!     ..ExperimentConfig::reference(1)
//! };
//! let out = run_experiment(&cfg).unwrap();
//! assert_eq!(out.records.len(), 1);
//! ```

pub mod attack;
pub mod config;
pub mod data;
pub mod defense;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod output;
pub mod seeding;

pub use error::{Error, Result};

// The guide's code blocks compile and run as doc-tests so the book cannot
// drift from the library.
#[cfg(doctest)]
mod booktests {
    macro_rules! book_chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(dead_code)]
            struct $name;
        };
    }
    book_chapter!(Overview, "../../../book/src/overview.md");
    book_chapter!(ModelChapter, "../../../book/src/model.md");
    book_chapter!(DataChapter, "../../../book/src/data.md");
    book_chapter!(AttacksChapter, "../../../book/src/attacks.md");
    book_chapter!(DefensesChapter, "../../../book/src/defenses.md");
    book_chapter!(ExperimentsChapter, "../../../book/src/experiments.md");
}
