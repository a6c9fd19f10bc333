//! Deterministic mock applications and the bundled workflows built from
//! them.

mod behavior;
pub mod fixtures;
mod mock;

pub use behavior::{BehaviorError, Direction, Misbehavior, MockBehavior, MockChannel};
pub use fixtures::{fixture_usecase1, fixture_usecase2, Fixture, RingParams};
pub use mock::{run_mock, BEHAVIOR_ERROR_EXIT, CHANNEL_ERROR_EXIT};
