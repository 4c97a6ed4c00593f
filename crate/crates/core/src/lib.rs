pub mod coordination;
pub mod derivative;
pub mod dmpc;
pub mod graph;
pub mod grid;
pub mod joint;
pub mod local_nlp;
pub mod ocp;
pub mod problem;
pub mod sbdp_ocp;
pub mod sbdp_static;
pub mod watertank;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/static.md")]
    mod static_problems {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/dmpc.md")]
    mod dmpc {}
    #[doc = include_str!("../../../book/src/watertank.md")]
    mod watertank {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
