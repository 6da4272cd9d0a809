//! Virtual network layer: links with delay and rate, a deterministic clock,
//! the Poisson sampler and the delay mutator.

pub mod clock;
pub mod link;
pub mod mutator;
pub mod poisson;

pub use clock::{run_tasks, Clock, ManualClock, Task, WallClock};
pub use link::{LinkState, Network, Rate};
pub use mutator::{delay_mutator_step, run_delay_mutator, DelayTarget, LinuxTc, MutationStep, VirtualLink, MUTATION_LOG_HEADER};
pub use poisson::{poisson_sample, PoissonParams};
