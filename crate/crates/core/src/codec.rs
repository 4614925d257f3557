//! Chain file format: one block per line as JSON with a fixed key order.
//!
//! Keys always appear in the order `kind, election_id, level, round,
//! ballot_box_id, candidate_id, prev_hash, nonce, lotb`, restricted to the
//! keys each kind uses. Hashes are lowercase hex, the encoding is UTF-8 with
//! `"\n"` line endings, and the first line is always the genesis block.
//! Batch blocks omit the `nonce` key entirely when the level is not mined.
//!
//! Every block has exactly one valid rendering, so an auditor can re-encode
//! a parsed line and demand byte equality.

use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde_json::Value;

use crate::block::{BatchBlock, Block, GenesisBlock, VoteBlock};
use crate::chain::{Chain, ChainError};
use crate::hash::{HashDigest, HexError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("not valid JSON: {0}")]
    Json(String),
    #[error("line is not a JSON object")]
    NotAnObject,
    #[error("missing key {0:?}")]
    MissingKey(&'static str),
    #[error("unexpected key {0:?}")]
    UnexpectedKey(String),
    #[error("unknown block kind {0:?}")]
    UnknownKind(String),
    #[error("key {0:?} has the wrong type")]
    BadValue(&'static str),
    #[error("bad hash: {0}")]
    BadHash(#[from] HexError),
    #[error("invalid block: {0}")]
    BadBlock(#[from] ChainError),
}

/// Parsing failure with a 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {error}")]
pub struct ParseError {
    pub line: usize,
    pub error: CodecError,
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Canonical single-line encoding of a block, without a trailing newline.
pub fn encode_block(block: &Block) -> String {
    let mut out = String::new();
    encode_into(block, &mut out);
    out
}

fn encode_into(block: &Block, out: &mut String) {
    match block {
        Block::Genesis(g) => {
            out.push_str("{\"kind\":\"genesis\",\"election_id\":");
            out.push_str(&json_string(g.election_id()));
            out.push_str(",\"level\":");
            out.push_str(&g.level().to_string());
            out.push('}');
        }
        Block::Vote(v) => {
            out.push_str("{\"kind\":\"vote\",\"election_id\":");
            out.push_str(&json_string(v.election_id()));
            out.push_str(",\"ballot_box_id\":");
            out.push_str(&json_string(v.ballot_box_id()));
            out.push_str(",\"candidate_id\":");
            out.push_str(&json_string(v.candidate_id()));
            out.push_str(",\"prev_hash\":\"");
            out.push_str(&v.prev_hash().to_hex());
            out.push_str("\",\"nonce\":");
            out.push_str(&json_string(v.nonce()));
            out.push('}');
        }
        Block::Batch(b) => {
            out.push_str("{\"kind\":\"batch\",\"election_id\":");
            out.push_str(&json_string(b.election_id()));
            out.push_str(",\"level\":");
            out.push_str(&b.level().to_string());
            out.push_str(",\"round\":");
            out.push_str(&b.round().to_string());
            out.push_str(",\"prev_hash\":\"");
            out.push_str(&b.prev_hash().to_hex());
            out.push('"');
            if let Some(nonce) = b.nonce() {
                out.push_str(",\"nonce\":");
                out.push_str(&json_string(nonce));
            }
            out.push_str(",\"lotb\":[");
            for (i, child) in b.lotb().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                encode_into(child, out);
            }
            out.push_str("]}");
        }
    }
}

/// Parses one canonical line into a block. Strict: unknown or missing keys,
/// wrong types, and non-lowercase hex are all errors.
pub fn parse_block(line: &str) -> Result<Block, CodecError> {
    let value: Value = serde_json::from_str(line).map_err(|e| CodecError::Json(e.to_string()))?;
    parse_value(&value)
}

fn parse_value(value: &Value) -> Result<Block, CodecError> {
    let obj = value.as_object().ok_or(CodecError::NotAnObject)?;
    let kind = obj
        .get("kind")
        .ok_or(CodecError::MissingKey("kind"))?
        .as_str()
        .ok_or(CodecError::BadValue("kind"))?;
    match kind {
        "genesis" => {
            expect_keys(obj, &["kind", "election_id", "level"])?;
            let g = GenesisBlock::new(get_str(obj, "election_id")?, get_u32(obj, "level")?)?;
            Ok(Block::Genesis(g))
        }
        "vote" => {
            expect_keys(
                obj,
                &[
                    "kind",
                    "election_id",
                    "ballot_box_id",
                    "candidate_id",
                    "prev_hash",
                    "nonce",
                ],
            )?;
            let v = VoteBlock::new(
                get_str(obj, "election_id")?,
                get_str(obj, "ballot_box_id")?,
                get_str(obj, "candidate_id")?,
                get_hash(obj, "prev_hash")?,
                get_str(obj, "nonce")?,
            )?;
            Ok(Block::Vote(v))
        }
        "batch" => {
            let has_nonce = obj.contains_key("nonce");
            if has_nonce {
                expect_keys(
                    obj,
                    &[
                        "kind",
                        "election_id",
                        "level",
                        "round",
                        "prev_hash",
                        "nonce",
                        "lotb",
                    ],
                )?;
            } else {
                expect_keys(
                    obj,
                    &["kind", "election_id", "level", "round", "prev_hash", "lotb"],
                )?;
            }
            let lotb_value = obj
                .get("lotb")
                .ok_or(CodecError::MissingKey("lotb"))?
                .as_array()
                .ok_or(CodecError::BadValue("lotb"))?;
            let mut lotb = Vec::with_capacity(lotb_value.len());
            for child in lotb_value {
                lotb.push(Arc::new(parse_value(child)?));
            }
            let nonce = if has_nonce {
                Some(get_str(obj, "nonce")?.to_string())
            } else {
                None
            };
            let b = BatchBlock::new(
                get_str(obj, "election_id")?,
                get_u32(obj, "level")?,
                get_u64(obj, "round")?,
                get_hash(obj, "prev_hash")?,
                lotb,
                nonce,
            )?;
            Ok(Block::Batch(b))
        }
        other => Err(CodecError::UnknownKind(other.to_string())),
    }
}

fn expect_keys(
    obj: &serde_json::Map<String, Value>,
    expected: &[&'static str],
) -> Result<(), CodecError> {
    for key in obj.keys() {
        if !expected.contains(&key.as_str()) {
            return Err(CodecError::UnexpectedKey(key.clone()));
        }
    }
    for key in expected {
        if !obj.contains_key(*key) {
            return Err(CodecError::MissingKey(key));
        }
    }
    Ok(())
}

fn get_str<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &'static str,
) -> Result<&'a str, CodecError> {
    obj.get(key)
        .ok_or(CodecError::MissingKey(key))?
        .as_str()
        .ok_or(CodecError::BadValue(key))
}

fn get_u64(obj: &serde_json::Map<String, Value>, key: &'static str) -> Result<u64, CodecError> {
    obj.get(key)
        .ok_or(CodecError::MissingKey(key))?
        .as_u64()
        .ok_or(CodecError::BadValue(key))
}

fn get_u32(obj: &serde_json::Map<String, Value>, key: &'static str) -> Result<u32, CodecError> {
    u32::try_from(get_u64(obj, key)?).map_err(|_| CodecError::BadValue(key))
}

fn get_hash(
    obj: &serde_json::Map<String, Value>,
    key: &'static str,
) -> Result<HashDigest, CodecError> {
    Ok(HashDigest::from_hex(get_str(obj, key)?)?)
}

/// Writes a chain in the canonical file format: genesis first, one block per
/// line, every line terminated by "\n".
pub fn write_chain<W: Write>(chain: &Chain, mut w: W) -> io::Result<()> {
    for block in chain.blocks() {
        w.write_all(encode_block(block).as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Renders a chain to its exact export bytes.
pub fn chain_to_string(chain: &Chain) -> String {
    let mut out = String::new();
    for block in chain.blocks() {
        encode_into(block, &mut out);
        out.push('\n');
    }
    out
}

/// Reads a chain file. The structure (genesis first, one election, matching
/// levels) is enforced here; link and pattern validity is the caller's
/// business via [`Chain::validate`].
pub fn read_chain<R: BufRead>(r: R) -> Result<Chain, ParseError> {
    let mut blocks: Vec<Arc<Block>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ParseError {
            line: line_no,
            error: CodecError::Json(e.to_string()),
        })?;
        let block = parse_block(&line).map_err(|error| ParseError {
            line: line_no,
            error,
        })?;
        blocks.push(Arc::new(block));
    }
    chain_from_blocks(blocks)
}

pub(crate) fn chain_from_blocks(blocks: Vec<Arc<Block>>) -> Result<Chain, ParseError> {
    let first = blocks.first().ok_or(ParseError {
        line: 1,
        error: CodecError::MissingKey("kind"),
    })?;
    let genesis = match first.as_ref() {
        Block::Genesis(g) => g,
        _ => {
            return Err(ParseError {
                line: 1,
                error: CodecError::BadValue("kind"),
            })
        }
    };
    Ok(Chain::from_parts(
        genesis.election_id().to_string(),
        genesis.level(),
        blocks,
    ))
}
