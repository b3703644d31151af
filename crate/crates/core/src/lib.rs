//! Numerical core of the in-context policy optimization laboratory.
//!
//! * [`bandit`]: linear bandit environment and common-random-number streams.
//! * [`teacher`]: FTRL-style teacher logits and γ-mixed policies.
//! * [`lsa`]: the linear self-attention student and its two-channel form.
//! * [`pretrain`]: datasets, Fisher-weighted loss and the two solvers.
//! * [`icpo_loop`]: closed-loop rollouts, policy matching and reward shocks.
//! * [`analysis`]: executable checks of the supporting inequalities.

pub mod analysis;
pub mod bandit;
pub mod error;
pub mod exec;
pub mod icpo_loop;
pub mod linalg;
pub mod lsa;
pub mod params_file;
pub mod pretrain;
pub mod teacher;

pub use bandit::{
    coupled_sample, draw_reward, sample_task, CrnStream, History, HistoryStep, TaskVector,
};
pub use error::{IcpoError, Result};
pub use exec::Exec;
pub use lsa::{LsaParams, TwoChannelParams};
pub use pretrain::{FisherStats, PretrainDataset};
pub use teacher::{MixedPolicy, TeacherConfig, TeacherSettings};
