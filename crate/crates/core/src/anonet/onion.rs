//! Layered wrapping and unwrapping of circuit messages.
//!
//! Each relay layer is an AEAD box whose plaintext starts with a 1-byte
//! marker: `0x01` means "forward" and is followed by the 6-byte address of
//! the next hop and the remaining ciphertext; `0x00` means "exit" and is
//! followed by the 6-byte final addressee and the message itself. For a
//! 3-hop circuit the structure is
//! `h1, K1(h2, K2(h3, K3(final, M)))` with the outermost frame addressed to
//! the first hop.

use rand::RngCore;

use crate::crypto::{open, seal, CryptoError, SymKey};
use crate::wire::Addr;

const LAYER_EXIT: u8 = 0x00;
const LAYER_FORWARD: u8 = 0x01;

/// What one unwrap step reveals to a relay.
#[derive(Debug, PartialEq, Eq)]
pub enum Peeled {
    /// Pass the remaining ciphertext to the next hop.
    Forward { next: Addr, inner: Vec<u8> },
    /// Innermost layer: deliver `msg` to `final_addr` (or consume it when
    /// the exit itself is the addressee).
    Exit { final_addr: Addr, msg: Vec<u8> },
}

/// Wrap `msg` for a circuit. `hop_addrs` and `keys` run from the hop nearest
/// the sender to the exit; `final_addr` is the addressee the exit serves.
/// Returns the payload for a Relay envelope addressed to the first hop.
pub fn onion_wrap(
    hop_addrs: &[Addr],
    keys: &[SymKey],
    final_addr: Addr,
    msg: &[u8],
    rng: &mut impl RngCore,
) -> Vec<u8> {
    assert_eq!(hop_addrs.len(), keys.len());
    assert!(!keys.is_empty(), "a circuit has at least one hop");
    let m = keys.len();

    let mut inner = Vec::with_capacity(7 + msg.len());
    inner.push(LAYER_EXIT);
    final_addr.encode_into(&mut inner);
    inner.extend_from_slice(msg);
    let mut layer = seal(&keys[m - 1], &inner, rng);

    for x in (0..m - 1).rev() {
        let mut plain = Vec::with_capacity(7 + layer.len());
        plain.push(LAYER_FORWARD);
        hop_addrs[x + 1].encode_into(&mut plain);
        plain.extend_from_slice(&layer);
        layer = seal(&keys[x], &plain, rng);
    }
    layer
}

/// Strip one layer with a hop's key.
pub fn peel(key: &SymKey, layer: &[u8]) -> Result<Peeled, CryptoError> {
    let plain = open(key, layer)?;
    if plain.len() < 7 {
        return Err(CryptoError::OpenFailed);
    }
    let addr = Addr::decode(&plain[1..7]).expect("length checked");
    match plain[0] {
        LAYER_FORWARD => Ok(Peeled::Forward {
            next: addr,
            inner: plain[7..].to_vec(),
        }),
        LAYER_EXIT => Ok(Peeled::Exit {
            final_addr: addr,
            msg: plain[7..].to_vec(),
        }),
        _ => Err(CryptoError::OpenFailed),
    }
}
