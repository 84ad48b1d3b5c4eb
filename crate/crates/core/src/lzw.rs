//! Decoder for the Unix `compress` (.Z) format.
//!
//! Codes are packed LSB-first. The encoder emits codes in groups of eight, so
//! whenever the code width grows or the table is cleared the reader skips to
//! the next group boundary, measured from where the previous group run began.

const MAGIC: [u8; 2] = [0x1f, 0x9d];
const BLOCK_MODE: u8 = 0x80;
const BITS_MASK: u8 = 0x1f;
const INIT_BITS: u32 = 9;
const CLEAR: usize = 256;

/// Returns `None` for anything that is not a well-formed .Z stream.
pub fn decompress(data: &[u8]) -> Option<Vec<u8>> {
    if data.len() < 3 || data[..2] != MAGIC {
        return None;
    }
    let flags = data[2];
    if flags & 0x60 != 0 {
        return None;
    }
    let max_bits = u32::from(flags & BITS_MASK);
    if !(INIT_BITS..=16).contains(&max_bits) {
        return None;
    }
    let block_mode = flags & BLOCK_MODE != 0;
    let max_max_code = 1usize << max_bits;

    let mut prefix = vec![0u16; max_max_code];
    let mut suffix: Vec<u8> = (0..max_max_code).map(|i| i as u8).collect();
    let mut stack = Vec::new();
    let mut out = Vec::with_capacity(data.len() * 3);

    let mut n_bits = INIT_BITS;
    let mut max_code = code_limit(n_bits, max_bits);
    let mut free_ent = if block_mode { 257 } else { 256 };
    let mut old_code: Option<usize> = None;
    let mut fin_char = 0u8;

    // `base` is the byte where the current group run started; `pos` counts bits from it.
    let mut base = 3usize;
    let mut pos = 0usize;

    'reset: loop {
        base += pos >> 3;
        pos = 0;
        let avail_bits = (data.len().saturating_sub(base) * 8).saturating_sub(n_bits as usize - 1);
        while avail_bits > pos {
            if free_ent > max_code {
                pos = align_to_group(pos, n_bits);
                n_bits += 1;
                max_code = code_limit(n_bits, max_bits);
                continue 'reset;
            }
            let code = read_code(data, base, pos, n_bits);
            pos += n_bits as usize;

            let Some(prev) = old_code else {
                if code >= 256 {
                    return None;
                }
                fin_char = code as u8;
                old_code = Some(code);
                out.push(fin_char);
                continue;
            };

            if code == CLEAR && block_mode {
                prefix.iter_mut().for_each(|p| *p = 0);
                free_ent = 256;
                pos = align_to_group(pos, n_bits);
                n_bits = INIT_BITS;
                max_code = code_limit(n_bits, max_bits);
                continue 'reset;
            }

            let in_code = code;
            let mut code = code;
            stack.clear();
            if code >= free_ent {
                if code > free_ent {
                    return None;
                }
                stack.push(fin_char);
                code = prev;
            }
            while code >= 256 {
                stack.push(suffix[code]);
                code = usize::from(prefix[code]);
            }
            fin_char = suffix[code];
            stack.push(fin_char);
            out.extend(stack.iter().rev());

            if free_ent < max_max_code {
                prefix[free_ent] = prev as u16;
                suffix[free_ent] = fin_char;
                free_ent += 1;
            }
            old_code = Some(in_code);
        }
        return Some(out);
    }
}

/// Largest code readable at this width before the width must grow.
fn code_limit(n_bits: u32, max_bits: u32) -> usize {
    if n_bits == max_bits {
        1usize << max_bits
    } else {
        (1usize << n_bits) - 1
    }
}

fn align_to_group(pos: usize, n_bits: u32) -> usize {
    if pos == 0 {
        return 0;
    }
    let group = (n_bits as usize) << 3;
    (pos - 1) + (group - (pos - 1 + group) % group)
}

fn read_code(data: &[u8], base: usize, pos: usize, n_bits: u32) -> usize {
    let at = base + (pos >> 3);
    let byte = |i: usize| usize::from(data.get(at + i).copied().unwrap_or(0));
    let word = byte(0) | (byte(1) << 8) | (byte(2) << 16);
    (word >> (pos & 7)) & ((1 << n_bits) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unhex(s: &str) -> Vec<u8> {
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
            .collect()
    }

    #[test]
    fn frozen_vectors_from_compress() {
        let cases: [(&str, &[u8]); 4] = [
            ("1f9d90", b""),
            ("1f9d906100", b"a"),
            (
                "1f9d90549e0829f2448a932754020e2ca890a041842300",
                b"TOBEORNOTTOBEORTOBEORNOT#",
            ),
            (
                "1f9d9068cab061f30644c081050f12342890a00285091b4644c810e14389151742ccf84601",
                b"hello hello hello hello\nhello hello hello hello\nhello hello hello hello\n",
            ),
        ];
        for (hex, plain) in cases {
            assert_eq!(decompress(&unhex(hex)).as_deref(), Some(plain), "{hex}");
        }
    }

    #[test]
    fn rejects_bad_headers() {
        assert_eq!(decompress(b"\x1f\x8b\x90"), None);
        assert_eq!(decompress(b"\x1f\x9d"), None);
        assert_eq!(decompress(b"\x1f\x9d\x88"), None);
        assert_eq!(decompress(b"\x1f\x9d\xf0"), None);
        assert_eq!(decompress(b"\x1f\x9d\x90\xff\xff"), None);
    }
}
