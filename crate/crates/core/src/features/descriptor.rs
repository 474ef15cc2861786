use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum Descriptor {
    /// Packed bit vector, first byte holds bits 0..8.
    Binary(Vec<u8>),
    Float(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DescriptorKind {
    Binary,
    Float,
}

impl DescriptorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorKind::Binary => "binary",
            DescriptorKind::Float => "float",
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("descriptor mismatch: {left_kind}/{left_len} vs {right_kind}/{right_len}")]
pub struct VariantMismatch {
    pub left_kind: DescriptorKind,
    pub left_len: usize,
    pub right_kind: DescriptorKind,
    pub right_len: usize,
}

impl Descriptor {
    pub fn kind(&self) -> DescriptorKind {
        match self {
            Descriptor::Binary(_) => DescriptorKind::Binary,
            Descriptor::Float(_) => DescriptorKind::Float,
        }
    }

    /// Payload length: bytes for binary, entries for float.
    pub fn len(&self) -> usize {
        match self {
            Descriptor::Binary(b) => b.len(),
            Descriptor::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn compatible(&self, other: &Descriptor) -> bool {
        self.kind() == other.kind() && self.len() == other.len()
    }

    pub fn distance(&self, other: &Descriptor) -> Result<f64, VariantMismatch> {
        match (self, other) {
            (Descriptor::Binary(a), Descriptor::Binary(b)) if a.len() == b.len() => Ok(hamming(a, b) as f64),
            (Descriptor::Float(a), Descriptor::Float(b)) if a.len() == b.len() => Ok(l2(a, b)),
            _ => Err(VariantMismatch {
                left_kind: self.kind(),
                left_len: self.len(),
                right_kind: other.kind(),
                right_len: other.len(),
            }),
        }
    }

    /// Distance without the compatibility check; callers guarantee matching variants.
    pub(crate) fn distance_unchecked(&self, other: &Descriptor) -> f64 {
        match (self, other) {
            (Descriptor::Binary(a), Descriptor::Binary(b)) => hamming(a, b) as f64,
            (Descriptor::Float(a), Descriptor::Float(b)) => l2(a, b),
            _ => f64::INFINITY,
        }
    }
}

pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> Result<f64, VariantMismatch> {
    a.distance(b)
}

pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let a = Descriptor::Float(vec![0.0; 4]);
        let b = Descriptor::Float(vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(a.distance(&b).unwrap(), 5.0);
        let x = Descriptor::Binary(vec![0b1010]);
        assert_eq!(x.distance(&x).unwrap(), 0.0);
        assert_eq!(Descriptor::Binary(vec![0b1111]).distance(&Descriptor::Binary(vec![0])).unwrap(), 4.0);
    }

    #[test]
    fn mismatch_is_reported() {
        let a = Descriptor::Float(vec![0.0; 4]);
        assert!(a.distance(&Descriptor::Float(vec![0.0; 3])).is_err());
        assert!(a.distance(&Descriptor::Binary(vec![0; 4])).is_err());
    }

    fn float3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 8)
    }

    fn bin3() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(any::<u8>(), 32)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn float_is_metric(a in float3(), b in float3(), c in float3()) {
            let (a, b, c) = (Descriptor::Float(a), Descriptor::Float(b), Descriptor::Float(c));
            let ab = a.distance(&b).unwrap();
            prop_assert_eq!(ab, b.distance(&a).unwrap());
            prop_assert_eq!(a.distance(&a).unwrap(), 0.0);
            prop_assert!(ab <= a.distance(&c).unwrap() + c.distance(&b).unwrap() + 1e-12);
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn hamming_is_metric(a in bin3(), b in bin3(), c in bin3()) {
            let (a, b, c) = (Descriptor::Binary(a), Descriptor::Binary(b), Descriptor::Binary(c));
            let ab = a.distance(&b).unwrap();
            prop_assert_eq!(ab, b.distance(&a).unwrap());
            prop_assert!(ab <= a.distance(&c).unwrap() + c.distance(&b).unwrap());
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
