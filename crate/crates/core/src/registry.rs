//! Mock e-government registry: voter authentication, the voted flag, the
//! ballot-box/candidate relation, and disaster reassignment.
//!
//! One authoritative instance serves an election. All mutations go through a
//! single lock, so `validate` and `mark_voted` are linearizable: at most one
//! live token exists per voter and the voted flag flips false -> true exactly
//! once, no matter how calls interleave.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::Mutex;

use serde::Deserialize;

use crate::block::BLANK_CANDIDATE;
use crate::hash::{sha256, HashDigest};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown voter")]
    UnknownVoter,
    #[error("wrong password")]
    WrongPassword,
    #[error("voter is not served by this station")]
    WrongStation,
    #[error("voter has already voted")]
    AlreadyVoted,
    #[error("a token for this voter is already outstanding")]
    TokenOutstanding,
    #[error("token was already consumed")]
    TokenAlreadyConsumed,
    #[error("token expired at round end")]
    TokenExpired,
    #[error("unknown ballot box")]
    UnknownBallotBox,
    #[error("candidate list may not register the reserved id {BLANK_CANDIDATE:?}")]
    ReservedCandidate,
}

/// What a voter presents at the station.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub voter_id: String,
    pub password: String,
}

impl Credentials {
    pub fn new(voter_id: impl Into<String>, password: impl Into<String>) -> Self {
        Credentials {
            voter_id: voter_id.into(),
            password: password.into(),
        }
    }
}

/// Single-use permission to cast one vote, bound to the station that issued
/// it. Consumed by exactly one cast or expired at round end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthToken {
    token_id: u64,
    pub voter_id: String,
    pub ballot_box_id: String,
    pub issued_round: u64,
}

#[derive(Debug, Clone)]
struct VoterRecord {
    password_digest: HashDigest,
    assigned_ballot_box: String,
    voted: bool,
    reassigned_to: Option<String>,
    live_token: Option<u64>,
}

impl VoterRecord {
    fn effective_ballot_box(&self) -> &str {
        self.reassigned_to
            .as_deref()
            .unwrap_or(&self.assigned_ballot_box)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub id: String,
    pub display_name: String,
}

/// Ballot-box to candidate relation. Every list implicitly ends with the
/// reserved blank vote.
#[derive(Debug, Clone, Default)]
pub struct CandidateRegistry {
    by_box: BTreeMap<String, Vec<Candidate>>,
}

impl CandidateRegistry {
    pub fn new() -> Self {
        CandidateRegistry::default()
    }

    pub fn register_box(
        &mut self,
        ballot_box_id: impl Into<String>,
        candidates: Vec<Candidate>,
    ) -> Result<(), RegistryError> {
        if candidates.iter().any(|c| c.id == BLANK_CANDIDATE) {
            return Err(RegistryError::ReservedCandidate);
        }
        self.by_box.insert(ballot_box_id.into(), candidates);
        Ok(())
    }

    pub fn contains_box(&self, ballot_box_id: &str) -> bool {
        self.by_box.contains_key(ballot_box_id)
    }

    pub fn boxes(&self) -> impl Iterator<Item = &str> {
        self.by_box.keys().map(|k| k.as_str())
    }

    /// The registered list plus the blank vote, in stable order.
    pub fn candidates_for(&self, ballot_box_id: &str) -> Result<Vec<Candidate>, RegistryError> {
        let registered = self
            .by_box
            .get(ballot_box_id)
            .ok_or(RegistryError::UnknownBallotBox)?;
        let mut list = registered.clone();
        list.push(Candidate {
            id: BLANK_CANDIDATE.to_string(),
            display_name: "Blank vote".to_string(),
        });
        Ok(list)
    }

    /// True iff `candidate_id` may appear on a ballot from this box.
    pub fn is_valid_choice(
        &self,
        ballot_box_id: &str,
        candidate_id: &str,
    ) -> Result<bool, RegistryError> {
        let registered = self
            .by_box
            .get(ballot_box_id)
            .ok_or(RegistryError::UnknownBallotBox)?;
        Ok(candidate_id == BLANK_CANDIDATE || registered.iter().any(|c| c.id == candidate_id))
    }
}

struct RegistryInner {
    voters: BTreeMap<String, VoterRecord>,
    current_round: u64,
    next_token_id: u64,
}

/// The trusted party: holds voter records and the candidate relation.
pub struct Registry {
    inner: Mutex<RegistryInner>,
    candidates: CandidateRegistry,
    salt: String,
}

fn password_digest(salt: &str, password: &str) -> HashDigest {
    sha256(format!("{salt}{password}").as_bytes())
}

impl Registry {
    pub fn new(candidates: CandidateRegistry, salt: impl Into<String>) -> Self {
        Registry {
            inner: Mutex::new(RegistryInner {
                voters: BTreeMap::new(),
                current_round: 0,
                next_token_id: 1,
            }),
            candidates,
            salt: salt.into(),
        }
    }

    pub fn candidates(&self) -> &CandidateRegistry {
        &self.candidates
    }

    /// Enrolls a voter. The plaintext password is digested immediately and
    /// never stored.
    pub fn enroll(
        &self,
        voter_id: impl Into<String>,
        password: &str,
        ballot_box_id: impl Into<String>,
    ) -> Result<(), RegistryError> {
        let ballot_box_id = ballot_box_id.into();
        if !self.candidates.contains_box(&ballot_box_id) {
            return Err(RegistryError::UnknownBallotBox);
        }
        let mut inner = self.inner.lock().expect("registry lock");
        inner.voters.insert(
            voter_id.into(),
            VoterRecord {
                password_digest: password_digest(&self.salt, password),
                assigned_ballot_box: ballot_box_id,
                voted: false,
                reassigned_to: None,
                live_token: None,
            },
        );
        Ok(())
    }

    pub fn voter_count(&self) -> usize {
        self.inner.lock().expect("registry lock").voters.len()
    }

    pub fn voted_count(&self) -> usize {
        let inner = self.inner.lock().expect("registry lock");
        inner.voters.values().filter(|v| v.voted).count()
    }

    pub fn effective_ballot_box(&self, voter_id: &str) -> Result<String, RegistryError> {
        let inner = self.inner.lock().expect("registry lock");
        let record = inner
            .voters
            .get(voter_id)
            .ok_or(RegistryError::UnknownVoter)?;
        Ok(record.effective_ballot_box().to_string())
    }

    /// Authenticates a voter at a station. A token is issued iff the voter
    /// exists, the password digest matches, the station serves the voter's
    /// effective ballot box, the voter has not voted, and no other token for
    /// the voter is live.
    ///
    /// Stations serve exactly one ballot box, so the station id here is the
    /// ballot box id it serves.
    pub fn validate(
        &self,
        credentials: &Credentials,
        node_ballot_box: &str,
    ) -> Result<AuthToken, RegistryError> {
        let mut inner = self.inner.lock().expect("registry lock");
        let round = inner.current_round;
        let token_id = inner.next_token_id;
        let record = inner
            .voters
            .get_mut(&credentials.voter_id)
            .ok_or(RegistryError::UnknownVoter)?;
        if record.password_digest != password_digest(&self.salt, &credentials.password) {
            return Err(RegistryError::WrongPassword);
        }
        if record.voted {
            return Err(RegistryError::AlreadyVoted);
        }
        if record.effective_ballot_box() != node_ballot_box {
            return Err(RegistryError::WrongStation);
        }
        if record.live_token.is_some() {
            return Err(RegistryError::TokenOutstanding);
        }
        record.live_token = Some(token_id);
        inner.next_token_id += 1;
        Ok(AuthToken {
            token_id,
            voter_id: credentials.voter_id.clone(),
            ballot_box_id: node_ballot_box.to_string(),
            issued_round: round,
        })
    }

    /// Flips the voter's flag to voted and consumes the token. After this no
    /// further token can ever be issued for the voter.
    pub fn mark_voted(&self, token: &AuthToken) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().expect("registry lock");
        if token.issued_round != inner.current_round {
            return Err(RegistryError::TokenExpired);
        }
        let record = inner
            .voters
            .get_mut(&token.voter_id)
            .ok_or(RegistryError::UnknownVoter)?;
        if record.live_token != Some(token.token_id) {
            return Err(RegistryError::TokenAlreadyConsumed);
        }
        record.voted = true;
        record.live_token = None;
        Ok(())
    }

    /// Releases an unconsumed token, e.g. when the cast failed after
    /// authentication.
    pub fn cancel_token(&self, token: &AuthToken) {
        let mut inner = self.inner.lock().expect("registry lock");
        if let Some(record) = inner.voters.get_mut(&token.voter_id) {
            if record.live_token == Some(token.token_id) {
                record.live_token = None;
            }
        }
    }

    /// Starts a new synchronization round; tokens issued earlier expire.
    pub fn advance_round(&self, round: u64) {
        let mut inner = self.inner.lock().expect("registry lock");
        if round > inner.current_round {
            inner.current_round = round;
            for record in inner.voters.values_mut() {
                record.live_token = None;
            }
        }
    }

    pub fn candidates_for(&self, ballot_box_id: &str) -> Result<Vec<Candidate>, RegistryError> {
        self.candidates.candidates_for(ballot_box_id)
    }

    /// Moves an unvoted voter to a new ballot box (disaster recovery).
    pub fn reassign(&self, voter_id: &str, new_ballot_box: &str) -> Result<(), RegistryError> {
        if !self.candidates.contains_box(new_ballot_box) {
            return Err(RegistryError::UnknownBallotBox);
        }
        let mut inner = self.inner.lock().expect("registry lock");
        let record = inner
            .voters
            .get_mut(voter_id)
            .ok_or(RegistryError::UnknownVoter)?;
        if record.voted {
            return Err(RegistryError::AlreadyVoted);
        }
        record.reassigned_to = Some(new_ballot_box.to_string());
        Ok(())
    }

    /// Voter ids currently assigned (or reassigned) to a box that have not
    /// voted yet; used when a center goes down mid-election.
    pub fn unvoted_voters_of_box(&self, ballot_box_id: &str) -> Vec<String> {
        let inner = self.inner.lock().expect("registry lock");
        inner
            .voters
            .iter()
            .filter(|(_, r)| !r.voted && r.effective_ballot_box() == ballot_box_id)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// One voter per line: `{"voter_id":..,"password":..,"ballot_box_id":..}`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VoterLine {
    voter_id: String,
    password: String,
    ballot_box_id: String,
}

pub fn load_voters_jsonl<R: BufRead>(r: R, registry: &Registry) -> anyhow::Result<usize> {
    let mut count = 0;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: VoterLine = serde_json::from_str(&line)
            .map_err(|e| anyhow::anyhow!("voter file line {}: {e}", i + 1))?;
        registry
            .enroll(parsed.voter_id, &parsed.password, parsed.ballot_box_id)
            .map_err(|e| anyhow::anyhow!("voter file line {}: {e}", i + 1))?;
        count += 1;
    }
    Ok(count)
}

/// One ballot box per line: `{"ballot_box_id":..,"candidates":[{"id":..,"display_name":..},..]}`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateBoxLine {
    ballot_box_id: String,
    candidates: Vec<CandidateLine>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateLine {
    id: String,
    display_name: String,
}

pub fn load_candidates_jsonl<R: BufRead>(r: R) -> anyhow::Result<CandidateRegistry> {
    let mut registry = CandidateRegistry::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CandidateBoxLine = serde_json::from_str(&line)
            .map_err(|e| anyhow::anyhow!("candidate file line {}: {e}", i + 1))?;
        let candidates = parsed
            .candidates
            .into_iter()
            .map(|c| Candidate {
                id: c.id,
                display_name: c.display_name,
            })
            .collect();
        registry
            .register_box(parsed.ballot_box_id, candidates)
            .map_err(|e| anyhow::anyhow!("candidate file line {}: {e}", i + 1))?;
    }
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn candidates_ab(boxes: &[&str]) -> CandidateRegistry {
        let mut c = CandidateRegistry::new();
        for b in boxes {
            c.register_box(
                *b,
                vec![
                    Candidate {
                        id: "A".into(),
                        display_name: "Candidate A".into(),
                    },
                    Candidate {
                        id: "B".into(),
                        display_name: "Candidate B".into(),
                    },
                ],
            )
            .unwrap();
        }
        c
    }

    fn registry_with_one_voter() -> Registry {
        let registry = Registry::new(candidates_ab(&["BOX-0", "BOX-1"]), "salt");
        registry.enroll("VOTER-1", "pw-1", "BOX-0").unwrap();
        registry
    }

    #[test]
    fn happy_path_then_already_voted() {
        let registry = registry_with_one_voter();
        let creds = Credentials::new("VOTER-1", "pw-1");
        let token = registry.validate(&creds, "BOX-0").unwrap();
        registry.mark_voted(&token).unwrap();
        assert_eq!(
            registry.validate(&creds, "BOX-0").unwrap_err(),
            RegistryError::AlreadyVoted
        );
        assert_eq!(registry.voted_count(), 1);
    }

    #[test]
    fn wrong_password_and_unknown_voter() {
        let registry = registry_with_one_voter();
        assert_eq!(
            registry
                .validate(&Credentials::new("VOTER-1", "nope"), "BOX-0")
                .unwrap_err(),
            RegistryError::WrongPassword
        );
        assert_eq!(
            registry
                .validate(&Credentials::new("GHOST", "pw"), "BOX-0")
                .unwrap_err(),
            RegistryError::UnknownVoter
        );
    }

    #[test]
    fn wrong_station_is_rejected() {
        let registry = registry_with_one_voter();
        assert_eq!(
            registry
                .validate(&Credentials::new("VOTER-1", "pw-1"), "BOX-1")
                .unwrap_err(),
            RegistryError::WrongStation
        );
    }

    #[test]
    fn token_is_single_use() {
        let registry = registry_with_one_voter();
        let token = registry
            .validate(&Credentials::new("VOTER-1", "pw-1"), "BOX-0")
            .unwrap();
        registry.mark_voted(&token).unwrap();
        assert_eq!(
            registry.mark_voted(&token).unwrap_err(),
            RegistryError::TokenAlreadyConsumed
        );
    }

    #[test]
    fn tokens_expire_at_round_end() {
        let registry = registry_with_one_voter();
        let token = registry
            .validate(&Credentials::new("VOTER-1", "pw-1"), "BOX-0")
            .unwrap();
        registry.advance_round(1);
        assert_eq!(
            registry.mark_voted(&token).unwrap_err(),
            RegistryError::TokenExpired
        );
        // After expiry the voter can authenticate again and vote.
        let fresh = registry
            .validate(&Credentials::new("VOTER-1", "pw-1"), "BOX-0")
            .unwrap();
        registry.mark_voted(&fresh).unwrap();
    }

    #[test]
    fn cancelled_tokens_free_the_voter() {
        let registry = registry_with_one_voter();
        let creds = Credentials::new("VOTER-1", "pw-1");
        let token = registry.validate(&creds, "BOX-0").unwrap();
        assert_eq!(
            registry.validate(&creds, "BOX-0").unwrap_err(),
            RegistryError::TokenOutstanding
        );
        registry.cancel_token(&token);
        let again = registry.validate(&creds, "BOX-0").unwrap();
        registry.mark_voted(&again).unwrap();
    }

    #[test]
    fn candidates_include_blank_in_stable_order() {
        let registry = registry_with_one_voter();
        let list = registry.candidates_for("BOX-0").unwrap();
        let ids: Vec<&str> = list.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["A", "B", BLANK_CANDIDATE]);
        assert_eq!(registry.candidates_for("BOX-0").unwrap(), list);
        assert_eq!(
            registry.candidates_for("BOX-9").unwrap_err(),
            RegistryError::UnknownBallotBox
        );
    }

    #[test]
    fn reassignment_moves_the_effective_box() {
        let registry = registry_with_one_voter();
        registry.reassign("VOTER-1", "BOX-1").unwrap();
        let creds = Credentials::new("VOTER-1", "pw-1");
        assert_eq!(
            registry.validate(&creds, "BOX-0").unwrap_err(),
            RegistryError::WrongStation
        );
        let token = registry.validate(&creds, "BOX-1").unwrap();
        registry.mark_voted(&token).unwrap();
        assert_eq!(
            registry.reassign("VOTER-1", "BOX-0").unwrap_err(),
            RegistryError::AlreadyVoted
        );
    }

    #[test]
    fn race_harness_admits_exactly_one_success() {
        // 1,000 concurrent validate+mark attempts for one voter.
        let registry = Arc::new(registry_with_one_voter());
        let successes = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let registry = Arc::clone(&registry);
            let successes = Arc::clone(&successes);
            handles.push(std::thread::spawn(move || {
                for _ in 0..125 {
                    if let Ok(token) =
                        registry.validate(&Credentials::new("VOTER-1", "pw-1"), "BOX-0")
                    {
                        if registry.mark_voted(&token).is_ok() {
                            successes.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(successes.load(Ordering::SeqCst), 1);
        assert_eq!(registry.voted_count(), 1);
    }

    #[test]
    fn jsonl_loaders_round_trip() {
        let candidates = load_candidates_jsonl(
            "{\"ballot_box_id\":\"BOX-0\",\"candidates\":[{\"id\":\"A\",\"display_name\":\"A.\"}]}\n"
                .as_bytes(),
        )
        .unwrap();
        let registry = Registry::new(candidates, "s");
        let n = load_voters_jsonl(
            "{\"voter_id\":\"V1\",\"password\":\"p\",\"ballot_box_id\":\"BOX-0\"}\n".as_bytes(),
            &registry,
        )
        .unwrap();
        assert_eq!(n, 1);
        assert!(registry
            .validate(&Credentials::new("V1", "p"), "BOX-0")
            .is_ok());
    }

    #[test]
    fn blank_cannot_be_registered_explicitly() {
        let mut c = CandidateRegistry::new();
        assert_eq!(
            c.register_box(
                "BOX-0",
                vec![Candidate {
                    id: BLANK_CANDIDATE.into(),
                    display_name: "x".into()
                }]
            )
            .unwrap_err(),
            RegistryError::ReservedCandidate
        );
    }
}
