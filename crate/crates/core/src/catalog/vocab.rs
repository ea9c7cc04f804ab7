//! The unified token vocabulary: text tokens, per-type SID blocks, and the
//! two span delimiters.
//!
//! Numbering is a bijection. Text tokens occupy `[0, text_token_count)`,
//! with id 0 reserved as the end-of-text marker. Each item type's block
//! follows in declaration order, `M * K` ids laid out position-major:
//! `base_offset + (m - 1) * K + c`. The `[SID]` and `[/SID]` delimiters take
//! the two ids immediately after all blocks.

use super::CatalogError;
use crate::embedding::ItemTypeSpace;

/// Token id reserved as the end-of-text marker inside the text range.
pub const END_OF_TEXT: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeBlock {
    pub item_type: String,
    pub m: usize,
    pub k: usize,
    pub base_offset: usize,
}

impl TypeBlock {
    pub fn size(&self) -> usize {
        self.m * self.k
    }

    fn contains(&self, id: usize) -> bool {
        id >= self.base_offset && id < self.base_offset + self.size()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    text_token_count: usize,
    blocks: Vec<TypeBlock>,
    sid_open: usize,
    sid_close: usize,
}

impl Vocabulary {
    /// Lays the blocks out contiguously after the text range and puts the
    /// delimiters right after the last block.
    pub fn build(
        text_token_count: usize,
        spaces: &[ItemTypeSpace],
    ) -> Result<Self, CatalogError> {
        if text_token_count == 0 {
            return Err(CatalogError::EmptyTextRange);
        }
        let mut blocks = Vec::with_capacity(spaces.len());
        let mut next = text_token_count;
        for s in spaces {
            blocks.push(TypeBlock {
                item_type: s.item_type.clone(),
                m: s.m,
                k: s.k,
                base_offset: next,
            });
            next += s.m * s.k;
        }
        Self::from_blocks(text_token_count, blocks, next, next + 1)
    }

    /// Builds from explicit blocks, rejecting any overlap between the text
    /// range, the blocks, and the delimiters.
    pub fn from_blocks(
        text_token_count: usize,
        blocks: Vec<TypeBlock>,
        sid_open: usize,
        sid_close: usize,
    ) -> Result<Self, CatalogError> {
        if text_token_count == 0 {
            return Err(CatalogError::EmptyTextRange);
        }
        let mut ranges: Vec<(usize, usize, String)> =
            vec![(0, text_token_count, "text".to_string())];
        for b in &blocks {
            if blocks
                .iter()
                .filter(|other| other.item_type == b.item_type)
                .count()
                > 1
            {
                return Err(CatalogError::DuplicateType {
                    item_type: b.item_type.clone(),
                });
            }
            ranges.push((b.base_offset, b.base_offset + b.size(), b.item_type.clone()));
        }
        ranges.push((sid_open, sid_open + 1, "[SID]".to_string()));
        ranges.push((sid_close, sid_close + 1, "[/SID]".to_string()));
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CatalogError::OverlappingBlocks {
                    a: w[0].2.clone(),
                    b: w[1].2.clone(),
                });
            }
        }
        Ok(Self {
            text_token_count,
            blocks,
            sid_open,
            sid_close,
        })
    }

    pub fn text_token_count(&self) -> usize {
        self.text_token_count
    }

    pub fn blocks(&self) -> &[TypeBlock] {
        &self.blocks
    }

    pub fn sid_open(&self) -> usize {
        self.sid_open
    }

    pub fn sid_close(&self) -> usize {
        self.sid_close
    }

    /// Total id count: text range, all blocks, and the two delimiters.
    pub fn total_size(&self) -> usize {
        self.text_token_count + self.blocks.iter().map(TypeBlock::size).sum::<usize>() + 2
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.text_token_count
    }

    pub fn block(&self, item_type: &str) -> Option<&TypeBlock> {
        self.blocks.iter().find(|b| b.item_type == item_type)
    }

    /// Token id for code `c` at 1-based position `m` in the type's block.
    pub fn sid_token_id(
        &self,
        item_type: &str,
        position: usize,
        code: u32,
    ) -> Result<usize, CatalogError> {
        let block = self
            .block(item_type)
            .ok_or_else(|| CatalogError::UnknownItemType {
                item_type: item_type.to_string(),
            })?;
        if position == 0 || position > block.m {
            return Err(CatalogError::PositionOutOfRange {
                item_type: item_type.to_string(),
                position,
                m: block.m,
            });
        }
        if code as usize >= block.k {
            return Err(CatalogError::CodeValueOutOfRange {
                item_type: item_type.to_string(),
                code,
                k: block.k,
            });
        }
        Ok(block.base_offset + (position - 1) * block.k + code as usize)
    }

    /// Inverse of [`sid_token_id`]: recovers (item_type, position, code) for
    /// a SID-block token, or None for text/delimiter ids.
    ///
    /// [`sid_token_id`]: Vocabulary::sid_token_id
    pub fn token_triple(&self, id: usize) -> Option<(&str, usize, u32)> {
        let block = self.blocks.iter().find(|b| b.contains(id))?;
        let rel = id - block.base_offset;
        let position = rel / block.k + 1;
        let code = (rel % block.k) as u32;
        Some((block.item_type.as_str(), position, code))
    }
}

/// Number of new ids needed on top of the text range: sum of M*K over the
/// item types plus the two span delimiters.
pub fn vocab_extension_size(spaces: &[ItemTypeSpace]) -> usize {
    spaces.iter().map(|s| s.m * s.k).sum::<usize>() + 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(t: &str, m: usize, k: usize) -> ItemTypeSpace {
        ItemTypeSpace::new(t, 8, 8, m, k).unwrap()
    }

    #[test]
    fn first_token_of_first_block_is_base_offset() {
        let v = Vocabulary::build(100, &[space("a", 4, 16)]).unwrap();
        assert_eq!(v.sid_token_id("a", 1, 0).unwrap(), 100);
        assert_eq!(v.sid_open(), 100 + 64);
        assert_eq!(v.sid_close(), 100 + 65);
    }

    #[test]
    fn round_trip_over_full_block_is_identity() {
        let v = Vocabulary::build(32, &[space("a", 4, 256), space("b", 2, 8)]).unwrap();
        for (t, m, k) in [("a", 4usize, 256usize), ("b", 2, 8)] {
            for pos in 1..=m {
                for code in 0..k as u32 {
                    let id = v.sid_token_id(t, pos, code).unwrap();
                    let (bt, bp, bc) = v.token_triple(id).unwrap();
                    assert_eq!((bt, bp, bc), (t, pos, code));
                }
            }
        }
        assert!(v.token_triple(5).is_none());
        assert!(v.token_triple(v.sid_open()).is_none());
    }

    #[test]
    fn overlapping_blocks_rejected() {
        let blocks = vec![
            TypeBlock { item_type: "a".into(), m: 2, k: 4, base_offset: 10 },
            TypeBlock { item_type: "b".into(), m: 2, k: 4, base_offset: 12 },
        ];
        assert!(matches!(
            Vocabulary::from_blocks(10, blocks, 30, 31),
            Err(CatalogError::OverlappingBlocks { .. })
        ));

        let dup = vec![
            TypeBlock { item_type: "a".into(), m: 1, k: 2, base_offset: 10 },
            TypeBlock { item_type: "a".into(), m: 1, k: 2, base_offset: 12 },
        ];
        assert!(matches!(
            Vocabulary::from_blocks(10, dup, 30, 31),
            Err(CatalogError::DuplicateType { .. })
        ));
    }

    #[test]
    fn extension_size_arithmetic() {
        let spaces = vec![
            space("episode", 4, 256),
            space("show", 4, 256),
            space("audiobook", 4, 256),
            space("artist", 4, 1024),
        ];
        assert_eq!(vocab_extension_size(&spaces), 7170);
        let degenerate = ItemTypeSpace {
            item_type: "only".into(),
            source_dim: 8,
            target_dim: 8,
            m: 1,
            k: 1,
        };
        assert_eq!(vocab_extension_size(&[degenerate]), 3);
        assert_eq!(vocab_extension_size(&[space("one", 4, 256)]), 1026);
    }

    #[test]
    fn out_of_range_lookups_rejected() {
        let v = Vocabulary::build(16, &[space("a", 2, 4)]).unwrap();
        assert!(v.sid_token_id("missing", 1, 0).is_err());
        assert!(v.sid_token_id("a", 3, 0).is_err());
        assert!(v.sid_token_id("a", 0, 0).is_err());
        assert!(v.sid_token_id("a", 1, 4).is_err());
    }
}
