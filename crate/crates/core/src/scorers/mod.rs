//! Scalar scores feeding the reward: scene/caption similarity, the ITM
//! probability aggregation, reference-LM naturalness, and the batch
//! retrieval-specialized similarity.

mod itm;
mod reflm;
mod rs;
mod sim;

pub use itm::{itm_aggregate, ItmHead, ItmOutput};
pub use reflm::{ref_score, train_reflm, RefLm};
pub use rs::{dual_softmax_diagonal, rs_reward, RS_EPS, RS_WEIGHT};
pub use sim::{sim_score, SimOracle, SimVariant};
