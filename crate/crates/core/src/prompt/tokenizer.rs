/// Token ids together with the byte range each token covers in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl Tokenized {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Text tokenizer interface. A real text backbone's tokenizer would sit behind
/// the same trait.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Tokenized;

    /// Id emitted for the `.` query separator.
    fn separator_id(&self) -> u32;

    fn vocab_size(&self) -> usize;
}

pub const PAD_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
const RESERVED: u32 = 2;

/// Lowercasing word tokenizer with ids assigned by FNV-1a hashing into a fixed
/// id space. Whitespace separates words; every other non-alphanumeric
/// character is its own token, and `.` always maps to [`SEP_ID`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab_size: usize,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > RESERVED as usize, "vocabulary must exceed the reserved ids");
        HashTokenizer { vocab_size }
    }

    fn word_id(&self, word: &str) -> u32 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for ch in word.chars().flat_map(char::to_lowercase) {
            let mut buf = [0u8; 4];
            for &b in ch.encode_utf8(&mut buf).as_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        RESERVED + (hash % (self.vocab_size as u64 - RESERVED as u64)) as u32
    }
}

impl Default for HashTokenizer {
    fn default() -> Self {
        HashTokenizer::new(4096)
    }
}

impl Tokenizer for HashTokenizer {
    fn tokenize(&self, text: &str) -> Tokenized {
        let mut out = Tokenized::default();
        let mut word_start: Option<usize> = None;

        let flush = |out: &mut Tokenized, start: Option<usize>, end: usize| {
            if let Some(s) = start {
                out.ids.push(self.word_id(&text[s..end]));
                out.offsets.push((s, end));
            }
        };

        for (i, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                word_start.get_or_insert(i);
                continue;
            }
            flush(&mut out, word_start.take(), i);
            if ch.is_whitespace() {
                continue;
            }
            let end = i + ch.len_utf8();
            let id = if ch == '.' {
                SEP_ID
            } else {
                self.word_id(&text[i..end])
            };
            out.ids.push(id);
            out.offsets.push((i, end));
        }
        flush(&mut out, word_start, text.len());
        out
    }

    fn separator_id(&self) -> u32 {
        SEP_ID
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}
