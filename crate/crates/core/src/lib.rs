pub mod bitstream;
pub mod huffman;
pub mod model;
pub mod prefix;
pub mod subpath;
pub mod pipeline;
pub mod protocol;
pub mod bundle;
pub mod prover;
pub mod verifier;
pub mod bench;
pub mod transport;

// The guide's snippets run as doctests of these modules.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/prefix.md")]
    mod prefix {}
    #[doc = include_str!("../../../book/src/subpaths.md")]
    mod subpaths {}
    #[doc = include_str!("../../../book/src/huffman.md")]
    mod huffman {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/speculation.md")]
    mod speculation {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/bench.md")]
    mod bench {}
}
