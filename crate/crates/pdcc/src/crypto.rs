//! Signature scheme used for votes, certificates, and commit proofs.
//!
//! The default scheme is a deterministic keyed-MAC construction with a
//! scenario-global key directory, so every node can verify every signer and
//! equal inputs always produce equal bytes. Signed messages are canonical
//! encodings of a tagged tuple; the tag separates fast-path votes,
//! settlement PREPARE/COMMIT, reconfiguration votes, attempt changes, and
//! delivery envelopes so a signature can never be replayed across message
//! classes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Digest, Encode};
use crate::domain::{
    Certificate, CommitProof, Configuration, ReconfigRequest, Transaction, ValidatorId,
};

const SIG_PREFIX: &[u8] = b"pdcc.sig.v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CertificateError {
    #[error("insufficient signatures: {got} distinct valid signers, quorum is {need}")]
    InsufficientSignatures { got: usize, need: usize },
    #[error("signer {0} is not a member of the configuration")]
    NonMemberSigner(ValidatorId),
    #[error("signature from {0} does not verify")]
    BadSignature(ValidatorId),
    #[error("certificate bound to epoch {cert} but verified against epoch {config}")]
    WrongEpoch { cert: u64, config: u64 },
    #[error("no key registered for {0}")]
    UnknownSigner(ValidatorId),
}

macro_rules! hex_newtype {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; 32]);

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({}..)"), &hex::encode(&self.0)[..8])
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                let arr: [u8; 32] =
                    bytes.try_into().map_err(|_| serde::de::Error::custom("bad length"))?;
                Ok($name(arr))
            }
        }

        impl Encode for $name {
            fn encode_into(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.0);
            }
        }
    };
}

hex_newtype!(Signature);
hex_newtype!(PublicKey);

/// Signing key. Under the MAC scheme the verification key carries the same
/// bytes; a real asymmetric scheme can be slotted in behind this interface.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    secret: [u8; 32],
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyPair(..)")
    }
}

impl KeyPair {
    pub fn from_bytes(secret: [u8; 32]) -> Self {
        KeyPair { secret }
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(KeyPair { secret: bytes.try_into().ok()? })
    }

    /// Deterministic per-validator key used when a scenario omits explicit
    /// key material.
    pub fn derive(id: ValidatorId) -> Self {
        let mut h = Sha256::new();
        h.update(b"pdcc.key.v1");
        h.update(id.0.to_be_bytes());
        KeyPair { secret: h.finalize().into() }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.secret)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.secret)
    }
}

pub fn sign(key: &KeyPair, message: &[u8]) -> Signature {
    let mut h = Sha256::new();
    h.update(SIG_PREFIX);
    h.update(key.secret);
    h.update(message);
    Signature(h.finalize().into())
}

pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    sign(&KeyPair { secret: public.0 }, message) == *sig
}

/// Scenario-global directory of verification keys.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyDirectory {
    keys: BTreeMap<ValidatorId, PublicKey>,
}

impl KeyDirectory {
    pub fn new(keys: impl IntoIterator<Item = (ValidatorId, PublicKey)>) -> Self {
        KeyDirectory { keys: keys.into_iter().collect() }
    }

    pub fn public(&self, id: ValidatorId) -> Option<&PublicKey> {
        self.keys.get(&id)
    }

    pub fn verify(&self, id: ValidatorId, message: &[u8], sig: &Signature) -> bool {
        self.public(id).map_or(false, |pk| verify(pk, message, sig))
    }
}

/// Message-class tags for domain separation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SignDomain {
    FastVote = 1,
    ReconfigVote = 2,
    Propose = 3,
    Prepare = 4,
    Commit = 5,
    AttemptChange = 6,
    Delivery = 7,
}

fn tagged(domain: SignDomain) -> Vec<u8> {
    vec![domain as u8]
}

/// Bytes a validator signs when voting for a transaction in an epoch.
pub fn fast_vote_message(epoch: u64, tx: &Transaction) -> Vec<u8> {
    let mut out = tagged(SignDomain::FastVote);
    epoch.encode_into(&mut out);
    tx.encode_into(&mut out);
    out
}

/// Bytes a validator signs when endorsing a reconfiguration request.
pub fn reconfig_vote_message(epoch: u64, req: &ReconfigRequest) -> Vec<u8> {
    let mut out = tagged(SignDomain::ReconfigVote);
    epoch.encode_into(&mut out);
    req.encode_into(&mut out);
    out
}

pub fn propose_message(epoch: u64, slot: u64, attempt: u64, payload_hash: Digest) -> Vec<u8> {
    let mut out = tagged(SignDomain::Propose);
    (epoch, slot, attempt).encode_into(&mut out);
    payload_hash.encode_into(&mut out);
    out
}

pub fn prepare_message(epoch: u64, slot: u64, attempt: u64, payload_hash: Digest) -> Vec<u8> {
    let mut out = tagged(SignDomain::Prepare);
    (epoch, slot, attempt).encode_into(&mut out);
    payload_hash.encode_into(&mut out);
    out
}

/// COMMIT votes deliberately omit the attempt so commit signatures gathered
/// across attempts aggregate into one proof.
pub fn commit_message(epoch: u64, slot: u64, payload_hash: Digest) -> Vec<u8> {
    let mut out = tagged(SignDomain::Commit);
    (epoch, slot).encode_into(&mut out);
    payload_hash.encode_into(&mut out);
    out
}

pub fn attempt_change_message(
    epoch: u64,
    slot: u64,
    next_attempt: u64,
    prepared: Option<(Digest, u64)>,
) -> Vec<u8> {
    let mut out = tagged(SignDomain::AttemptChange);
    (epoch, slot, next_attempt).encode_into(&mut out);
    prepared.encode_into(&mut out);
    out
}

pub fn delivery_message(epoch: u64, slot: u64, attempt: u64, payload_hash: Digest) -> Vec<u8> {
    let mut out = tagged(SignDomain::Delivery);
    (epoch, slot, attempt).encode_into(&mut out);
    payload_hash.encode_into(&mut out);
    out
}

/// The message a certificate's signatures must cover for a given payload
/// class.
pub fn certificate_message<P: Encode>(domain: SignDomain, epoch: u64, payload: &P) -> Vec<u8> {
    let mut out = tagged(domain);
    epoch.encode_into(&mut out);
    payload.encode_into(&mut out);
    out
}

/// Aggregates votes into a certificate. Duplicate signers are deduplicated
/// (first vote wins) before the quorum count; non-members and bad signatures
/// are errors rather than silently dropped.
pub fn assemble_certificate<P: Encode + Clone>(
    config: &Configuration,
    directory: &KeyDirectory,
    domain: SignDomain,
    epoch: u64,
    payload: &P,
    votes: &[(ValidatorId, Signature)],
) -> Result<Certificate<P>, CertificateError> {
    let message = certificate_message(domain, epoch, payload);
    let mut seen: BTreeMap<ValidatorId, Signature> = BTreeMap::new();
    for (id, sig) in votes {
        if seen.contains_key(id) {
            continue;
        }
        if !config.contains(*id) {
            return Err(CertificateError::NonMemberSigner(*id));
        }
        if !directory.verify(*id, &message, sig) {
            return Err(CertificateError::BadSignature(*id));
        }
        seen.insert(*id, *sig);
    }
    let need = config.quorum();
    if seen.len() < need {
        return Err(CertificateError::InsufficientSignatures { got: seen.len(), need });
    }
    Ok(Certificate {
        config_index: epoch,
        payload: payload.clone(),
        signatures: seen.into_iter().collect(),
    })
}

/// Checks that `signers` are distinct members of `config`, number at least
/// the quorum, and that every signature verifies over `message`.
fn verify_quorum(
    config: &Configuration,
    directory: &KeyDirectory,
    message: &[u8],
    signatures: &[(ValidatorId, Signature)],
) -> Result<(), CertificateError> {
    let mut distinct = std::collections::BTreeSet::new();
    for (id, sig) in signatures {
        if !config.contains(*id) {
            return Err(CertificateError::NonMemberSigner(*id));
        }
        if !directory.verify(*id, message, sig) {
            return Err(CertificateError::BadSignature(*id));
        }
        distinct.insert(*id);
    }
    let need = config.quorum();
    if distinct.len() < need {
        return Err(CertificateError::InsufficientSignatures { got: distinct.len(), need });
    }
    Ok(())
}

/// Verifies a certificate against the configuration it claims; the epochs
/// must match exactly.
pub fn verify_certificate<P: Encode>(
    config: &Configuration,
    directory: &KeyDirectory,
    domain: SignDomain,
    cert: &Certificate<P>,
) -> Result<(), CertificateError> {
    if cert.config_index != config.index {
        return Err(CertificateError::WrongEpoch {
            cert: cert.config_index,
            config: config.index,
        });
    }
    let message = certificate_message(domain, cert.config_index, &cert.payload);
    verify_quorum(config, directory, &message, &cert.signatures)
}

/// Verifies a commit proof against an explicit member set; used both by
/// validators and by the snapshot / trace auditors that replay history.
pub fn verify_commit_proof(
    config: &Configuration,
    directory: &KeyDirectory,
    proof: &CommitProof,
) -> Result<(), CertificateError> {
    if proof.config_index != config.index {
        return Err(CertificateError::WrongEpoch {
            cert: proof.config_index,
            config: config.index,
        });
    }
    let message = commit_message(proof.config_index, proof.slot, proof.payload_hash);
    verify_quorum(config, directory, &message, &proof.signatures)
}
