//! Integrity digests over packet field classes, and mutation localization
//! from a history of match/mismatch verdicts under varying coverage.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::error::IntegrityError;
use crate::packet::PacketView;
use crate::wire::{CoverSet, FieldClass, IntegrityMode};

/// Digest over the covered field classes: the first 8 bytes of
/// SHA-256(mode byte || cover byte || salt || covered classes in bit order).
///
/// Plain mode takes no salt (anyone on path can recompute); the salted modes
/// require one.
pub fn compute_integrity(
    view: &PacketView,
    cover: CoverSet,
    mode: IntegrityMode,
    salt: &[u8],
) -> Result<u64, IntegrityError> {
    match mode {
        IntegrityMode::Plain => {
            if !salt.is_empty() {
                return Err(IntegrityError::UnexpectedSalt);
            }
        }
        IntegrityMode::SenderSalt => {
            if salt.is_empty() {
                return Err(IntegrityError::MissingSalt("sender_salt"));
            }
        }
        IntegrityMode::SharedSalt => {
            if salt.is_empty() {
                return Err(IntegrityError::MissingSalt("shared_salt"));
            }
        }
    }
    let mut hasher = Sha256::new();
    hasher.update([mode.code(), cover.bits()]);
    hasher.update(salt);
    for class in cover.classes() {
        hasher.update(view.bytes(class));
    }
    let digest = hasher.finalize();
    Ok(u64::from_be_bytes(digest[..8].try_into().unwrap()))
}

/// What a verdict history says about each observed field class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MutationFindings {
    pub mutated: BTreeSet<FieldClass>,
    pub intact: BTreeSet<FieldClass>,
    pub undetermined: BTreeSet<FieldClass>,
}

/// Single-packet verdicts are binary over the whole cover; across a flow
/// with varying covers the mutated classes can be pinned down.
///
/// A class is intact if any cover containing it matched. It is mutated if it
/// never appeared in a matching cover and some mismatching cover contains it
/// with every other member already known intact. Anything else observed is
/// undetermined.
pub fn localize_mutation(history: &[(CoverSet, bool)]) -> MutationFindings {
    let mut findings = MutationFindings::default();
    let mut observed = BTreeSet::new();
    for (cover, _) in history {
        observed.extend(cover.classes());
    }

    for class in &observed {
        let matched_somewhere = history
            .iter()
            .any(|(cover, ok)| *ok && cover.contains(*class));
        if matched_somewhere {
            findings.intact.insert(*class);
        }
    }

    for class in &observed {
        if findings.intact.contains(class) {
            continue;
        }
        let pinned = history.iter().any(|(cover, ok)| {
            !*ok
                && cover.contains(*class)
                && cover
                    .classes()
                    .all(|other| other == *class || findings.intact.contains(&other))
        });
        if pinned {
            findings.mutated.insert(*class);
        } else {
            findings.undetermined.insert(*class);
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view() -> PacketView {
        PacketView::from_parts(
            b"addr".to_vec(),
            b"po".to_vec(),
            b"thdr".to_vec(),
            b"payload bytes".to_vec(),
            b"shim".to_vec(),
        )
    }

    #[test]
    fn digest_is_deterministic() {
        let cover = CoverSet::empty()
            .with(FieldClass::Addresses)
            .with(FieldClass::Payload);
        let a = compute_integrity(&view(), cover, IntegrityMode::Plain, &[]).unwrap();
        let b = compute_integrity(&view(), cover, IntegrityMode::Plain, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_mode_recomputable_from_contents_alone() {
        // A third party holding only the packet view derives the same value.
        let cover = CoverSet::full();
        let sender = compute_integrity(&view(), cover, IntegrityMode::Plain, &[]).unwrap();
        let middlebox = compute_integrity(&view(), cover, IntegrityMode::Plain, &[]).unwrap();
        assert_eq!(sender, middlebox);
    }

    #[test]
    fn salted_digest_differs_and_needs_salt() {
        let cover = CoverSet::full();
        let plain = compute_integrity(&view(), cover, IntegrityMode::Plain, &[]).unwrap();
        let salted =
            compute_integrity(&view(), cover, IntegrityMode::SenderSalt, b"secret").unwrap();
        assert_ne!(plain, salted);
        assert_eq!(
            compute_integrity(&view(), cover, IntegrityMode::SenderSalt, &[]),
            Err(IntegrityError::MissingSalt("sender_salt"))
        );
        assert_eq!(
            compute_integrity(&view(), cover, IntegrityMode::SharedSalt, &[]),
            Err(IntegrityError::MissingSalt("shared_salt"))
        );
        assert_eq!(
            compute_integrity(&view(), cover, IntegrityMode::Plain, b"x"),
            Err(IntegrityError::UnexpectedSalt)
        );
    }

    #[test]
    fn single_byte_flip_changes_digest() {
        let cover = CoverSet::empty().with(FieldClass::Payload);
        let baseline = compute_integrity(&view(), cover, IntegrityMode::Plain, &[]).unwrap();
        let payload = b"payload bytes".to_vec();
        for i in 0..payload.len() {
            for bit in 0..8 {
                let mut mutated = payload.clone();
                mutated[i] ^= 1 << bit;
                let v = PacketView::from_parts(
                    b"addr".to_vec(),
                    b"po".to_vec(),
                    b"thdr".to_vec(),
                    mutated,
                    b"shim".to_vec(),
                );
                let d = compute_integrity(&v, cover, IntegrityMode::Plain, &[]).unwrap();
                assert_ne!(d, baseline, "flip at byte {i} bit {bit} went unnoticed");
            }
        }
    }

    #[test]
    fn uncovered_class_does_not_affect_digest() {
        let cover = CoverSet::empty().with(FieldClass::Addresses);
        let a = compute_integrity(&view(), cover, IntegrityMode::Plain, &[]).unwrap();
        let v = PacketView::from_parts(
            b"addr".to_vec(),
            b"po".to_vec(),
            b"thdr".to_vec(),
            b"DIFFERENT".to_vec(),
            b"shim".to_vec(),
        );
        let b = compute_integrity(&v, cover, IntegrityMode::Plain, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn localize_all_matching_means_all_intact() {
        let full = CoverSet::full();
        let findings = localize_mutation(&[(full, true), (full, true)]);
        assert_eq!(findings.intact.len(), 5);
        assert!(findings.mutated.is_empty());
        assert!(findings.undetermined.is_empty());
    }

    #[test]
    fn localize_pins_single_mutated_class() {
        let addr = CoverSet::empty().with(FieldClass::Addresses);
        let payload = CoverSet::empty().with(FieldClass::Payload);
        let both = addr.with(FieldClass::Payload);
        let findings = localize_mutation(&[(addr, false), (payload, true), (both, false)]);
        assert!(findings.mutated.contains(&FieldClass::Addresses));
        assert!(findings.intact.contains(&FieldClass::Payload));
        assert!(findings.undetermined.is_empty());
    }

    #[test]
    fn localize_joint_cover_only_is_undetermined() {
        let both = CoverSet::empty()
            .with(FieldClass::Addresses)
            .with(FieldClass::Payload);
        let findings = localize_mutation(&[(both, false)]);
        assert!(findings.mutated.is_empty());
        assert!(findings.intact.is_empty());
        assert_eq!(findings.undetermined.len(), 2);
    }
}
