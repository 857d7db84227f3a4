pub mod abr;
pub mod beamform;
pub mod channel;
pub mod config;
pub mod experiment;
pub mod fairness;
pub mod numerics;
pub mod player;
pub mod quality;
pub mod rl;
pub mod tracegen;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/quality.md")]
    mod quality {}
    #[doc = include_str!("../../../book/src/beamforming.md")]
    mod beamforming {}
    #[doc = include_str!("../../../book/src/player.md")]
    mod player {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
