//! Guide chapters, compiled as doc-tests so their snippets stay runnable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub struct Introduction;

#[doc = include_str!("../../../book/src/crossbasis.md")]
pub struct CrossBasisChapter;

#[doc = include_str!("../../../book/src/fitting.md")]
pub struct FittingChapter;

#[doc = include_str!("../../../book/src/effects.md")]
pub struct EffectsChapter;

#[doc = include_str!("../../../book/src/testing.md")]
pub struct TestingChapter;

#[doc = include_str!("../../../book/src/mixed.md")]
pub struct MixedChapter;

#[doc = include_str!("../../../book/src/simulation.md")]
pub struct SimulationChapter;

#[doc = include_str!("../../../book/src/cli.md")]
pub struct CliChapter;
