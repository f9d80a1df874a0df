//! Cryptographic primitives used across the protocol: hashing, unique
//! (deterministic) signatures, an authenticated ephemeral key exchange, and
//! authenticated symmetric encryption for circuit and link traffic.
//!
//! Signatures are Ed25519, which is deterministic by construction: signing the
//! same message with the same key always yields identical bytes. The round
//! randomness chain relies on this — a leader cannot grind for a favorable
//! next-round value by re-signing.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// 32-byte hash output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Digest> {
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..8])
    }
}

/// SHA-256 over an arbitrary byte sequence.
pub fn hash(data: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(data);
    Digest(h.finalize().into())
}

/// Hash over the concatenation of several slices, without allocating.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const SYM_KEY_LEN: usize = 32;

/// Ed25519 verification key; doubles as the account identity (coinbase).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<PublicKey, CryptoError> {
        let bytes = hex::decode(s).map_err(|_| CryptoError::BadKeyEncoding)?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::BadKeyEncoding)?;
        Ok(PublicKey(arr))
    }
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({}..)", &self.to_hex()[..8])
    }
}

/// Detached Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub const ZERO: Signature = Signature([0u8; SIGNATURE_LEN]);

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signature({}..)", &hex::encode(&self.0[..4]))
    }
}

/// Signing identity. Holds the Ed25519 secret; the public half serves as the
/// on-chain account key.
#[derive(Clone)]
pub struct Keypair {
    signing: ed25519_dalek::SigningKey,
}

impl Keypair {
    /// Derive a keypair from a 32-byte seed. Equal seeds give equal keys.
    pub fn from_seed(seed: &[u8; 32]) -> Keypair {
        Keypair {
            signing: ed25519_dalek::SigningKey::from_bytes(seed),
        }
    }

    pub fn generate(rng: &mut impl RngCore) -> Keypair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Keypair::from_seed(&seed)
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    /// Deterministic signature: repeated calls on the same message yield
    /// byte-identical output.
    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }

    /// Static Diffie-Hellman secret for the key exchange, derived from the
    /// signing seed so a node needs only one secret on disk.
    pub fn dh_secret(&self) -> x25519_dalek::StaticSecret {
        let d = hash_parts(&[b"veilchain-dh-v1", &self.signing.to_bytes()]);
        x25519_dalek::StaticSecret::from(d.0)
    }

    pub fn dh_public(&self) -> [u8; 32] {
        x25519_dalek::PublicKey::from(&self.dh_secret()).to_bytes()
    }
}

impl std::fmt::Debug for Keypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Keypair({:?})", self.public())
    }
}

/// Verify `sig` over `msg` under `pk`. Any bit flip in message, signature, or
/// key makes this return false.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let s = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify(msg, &s).is_ok()
}

/// Shared symmetric key for one circuit hop or one link pair.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey(pub [u8; SYM_KEY_LEN]);

impl std::fmt::Debug for SymKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SymKey(..)")
    }
}

/// Fixed ciphertext expansion of [`seal`]: 12-byte nonce + 16-byte tag.
pub const SEAL_OVERHEAD: usize = 28;

/// Authenticated encryption (ChaCha20-Poly1305). A fresh random nonce is
/// drawn per message and prepended to the ciphertext.
pub fn seal(key: &SymKey, plaintext: &[u8], rng: &mut impl RngCore) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload::from(plaintext))
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(12 + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

/// Open a [`seal`]ed message. Fails on truncation, tampering, or wrong key.
pub fn open(key: &SymKey, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < SEAL_OVERHEAD {
        return Err(CryptoError::OpenFailed);
    }
    let (nonce, ct) = sealed.split_at(12);
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload::from(ct))
        .map_err(|_| CryptoError::OpenFailed)
}

/// Initiator half of the key exchange: an ephemeral X25519 secret.
pub struct KxInitiator {
    secret: x25519_dalek::StaticSecret,
}

impl KxInitiator {
    pub fn new(rng: &mut impl RngCore) -> KxInitiator {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        KxInitiator {
            secret: x25519_dalek::StaticSecret::from(seed),
        }
    }

    /// Public half to send to the responder.
    pub fn public(&self) -> [u8; 32] {
        x25519_dalek::PublicKey::from(&self.secret).to_bytes()
    }

    /// Derive the shared key once the responder's static DH public key is
    /// known (delivered in its acknowledgement, signed under its directory
    /// key).
    pub fn derive(&self, responder_dh_pk: &[u8; 32]) -> SymKey {
        derive_shared(
            &self.secret,
            responder_dh_pk,
            &self.public(),
            responder_dh_pk,
        )
    }
}

/// Responder side: derive the same key from the initiator's ephemeral public
/// key and the responder's static DH secret.
pub fn kx_respond(
    responder: &Keypair,
    initiator_eph_pk: &[u8; 32],
) -> (SymKey, [u8; 32]) {
    let dh_secret = responder.dh_secret();
    let dh_pk = x25519_dalek::PublicKey::from(&dh_secret).to_bytes();
    let key = derive_shared(&dh_secret, initiator_eph_pk, initiator_eph_pk, &dh_pk);
    (key, dh_pk)
}

fn derive_shared(
    own_secret: &x25519_dalek::StaticSecret,
    their_pk: &[u8; 32],
    eph_pk: &[u8; 32],
    dh_pk: &[u8; 32],
) -> SymKey {
    let shared = own_secret.diffie_hellman(&x25519_dalek::PublicKey::from(*their_pk));
    let hk = Hkdf::<Sha256>::new(None, shared.as_bytes());
    let mut okm = [0u8; SYM_KEY_LEN];
    let mut info = Vec::with_capacity(16 + 64);
    info.extend_from_slice(b"veilchain-kx-v1");
    info.extend_from_slice(eph_pk);
    info.extend_from_slice(dh_pk);
    hk.expand(&info, &mut okm)
        .expect("32 bytes is a valid hkdf output length");
    SymKey(okm)
}

/// Transcript the responder signs in its key-exchange acknowledgement,
/// binding the exchange to its directory identity.
pub fn kx_ack_transcript(exchange_id: u64, eph_pk: &[u8; 32], dh_pk: &[u8; 32]) -> Vec<u8> {
    let mut t = Vec::with_capacity(8 + 64 + 16);
    t.extend_from_slice(b"veilchain-kx-ack");
    t.extend_from_slice(&exchange_id.to_be_bytes());
    t.extend_from_slice(eph_pk);
    t.extend_from_slice(dh_pk);
    t
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authenticated decryption failed")]
    OpenFailed,
    #[error("malformed key encoding")]
    BadKeyEncoding,
}
