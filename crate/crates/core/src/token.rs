//! Token configuration files and token-delimited submissions.
//!
//! A token configuration has one line per input file a solver expects:
//!
//! ```text
//! label : type-or-default : begin-token : end-token|NULL : target-file
//! ```
//!
//! A submission is a single byte stream carrying every input file between
//! its tokens. Interfaces that build submissions for the user emit the sized
//! form `begin.token[N]`, which is followed by exactly `N` content bytes and
//! is the only form that can carry binary data.

use std::collections::BTreeMap;
use std::io::Read;

use log::warn;
use thiserror::Error;

use crate::lzw;

pub const END_OF_INPUT: &str = "END-SERVER-INPUT";

const RESERVED_WORDS: [&str; 3] = ["TYPE", "SOLVER", END_OF_INPUT];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("token configuration line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },
    #[error("token configuration line {line}: duplicate target file `{target}`")]
    DuplicateTarget { line: usize, target: String },
    #[error("no end token found for section `{0}`")]
    UnterminatedSection(String),
    #[error("section `{token}` declares {declared} bytes but only {available} remain")]
    TruncatedSection {
        token: String,
        declared: usize,
        available: usize,
    },
    #[error("unknown field `{0}`")]
    UnknownField(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadioOption {
    pub display: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryKind {
    /// Large free-text field (`TEXT`).
    TextArea,
    /// Yes/no switch (`BINARY-ON` / `BINARY-OFF`).
    BinaryToggle { default_on: bool },
    /// One of a fixed set of values (`RADIO .Display,value ...`).
    Radio { options: Vec<RadioOption> },
    /// Short value given on the token line itself.
    ScalarVar { default: Option<String> },
    /// A user file. `binary` files are never altered by the parser.
    FileUpload {
        default_path: Option<String>,
        binary: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenConfigEntry {
    pub label: String,
    pub kind: EntryKind,
    pub begin_token: String,
    pub end_token: Option<String>,
    pub target_file: String,
}

impl TokenConfigEntry {
    /// Value lives on the begin-token line (end token is `NULL`).
    pub fn is_scalar(&self) -> bool {
        self.end_token.is_none()
    }

    /// Begin token ends with `BINARY`: contents are preserved byte for byte.
    pub fn is_binary(&self) -> bool {
        ends_with_ignore_case(&self.begin_token, "BINARY")
    }
}

/// A parsed token configuration, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenConfig {
    entries: Vec<TokenConfigEntry>,
}

impl TokenConfig {
    pub fn entries(&self) -> &[TokenConfigEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn by_target(&self, target: &str) -> Option<&TokenConfigEntry> {
        self.entries.iter().find(|e| e.target_file == target)
    }

    pub fn by_begin(&self, token: &[u8]) -> Option<&TokenConfigEntry> {
        self.entries
            .iter()
            .find(|e| token.eq_ignore_ascii_case(e.begin_token.as_bytes()))
    }

    /// Case-insensitive lookup by the human-readable label.
    pub fn by_label(&self, label: &str) -> Option<&TokenConfigEntry> {
        self.entries
            .iter()
            .find(|e| e.label.eq_ignore_ascii_case(label.trim()))
    }
}

/// Input files recovered from a submission, keyed by target file name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubmissionFields {
    pub solver_type: String,
    pub solver_id: String,
    pub sections: BTreeMap<String, Vec<u8>>,
}

pub fn parse_token_config(text: &[u8]) -> Result<TokenConfig, TokenError> {
    let text = String::from_utf8_lossy(text);
    let mut entries: Vec<TokenConfigEntry> = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let syntax = |reason: String| TokenError::ConfigSyntax { line, reason };
        let fields: Vec<&str> = raw.split(':').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(syntax(format!(
                "expected 5 colon-separated fields, found {}",
                fields.len()
            )));
        }
        let (label, kind_field, begin, end, target) =
            (fields[0], fields[1], fields[2], fields[3], fields[4]);
        if begin.is_empty() {
            return Err(syntax("empty begin token".into()));
        }
        check_token(begin).map_err(&syntax)?;
        let end_token = if end.eq_ignore_ascii_case("NULL") {
            None
        } else if end.is_empty() {
            return Err(syntax(
                "empty end token (use NULL for a value field)".into(),
            ));
        } else {
            check_token(end).map_err(&syntax)?;
            Some(end.to_string())
        };
        if target.is_empty() {
            return Err(syntax("empty target file".into()));
        }
        if target.contains('/') || target == "." || target == ".." {
            return Err(syntax(format!(
                "target file `{target}` is not a plain file name"
            )));
        }
        if entries.iter().any(|e| e.target_file == target) {
            return Err(TokenError::DuplicateTarget {
                line,
                target: target.to_string(),
            });
        }
        if entries
            .iter()
            .any(|e| e.begin_token.eq_ignore_ascii_case(begin))
        {
            return Err(syntax(format!("duplicate begin token `{begin}`")));
        }
        let kind = classify(kind_field, begin, end_token.is_none()).map_err(syntax)?;
        entries.push(TokenConfigEntry {
            label: label.to_string(),
            kind,
            begin_token: begin.to_string(),
            end_token,
            target_file: target.to_string(),
        });
    }
    Ok(TokenConfig { entries })
}

fn check_token(token: &str) -> Result<(), String> {
    if token
        .chars()
        .any(|c| c.is_whitespace() || c == '=' || c == '[' || c == ']')
    {
        return Err(format!(
            "token `{token}` contains whitespace, `=` or brackets"
        ));
    }
    if RESERVED_WORDS.iter().any(|w| token.eq_ignore_ascii_case(w)) {
        return Err(format!("token `{token}` is reserved"));
    }
    Ok(())
}

fn classify(field: &str, begin: &str, scalar: bool) -> Result<EntryKind, String> {
    let upper = field.to_ascii_uppercase();
    if upper == "TEXT" {
        return Ok(EntryKind::TextArea);
    }
    if upper == "BINARY-ON" || upper == "BINARY-OFF" {
        return Ok(EntryKind::BinaryToggle {
            default_on: upper == "BINARY-ON",
        });
    }
    if upper == "RADIO" || upper.starts_with("RADIO ") || upper.starts_with("RADIO\t") {
        let options = field[5..]
            .split_whitespace()
            .map(parse_radio_option)
            .collect::<Result<Vec<_>, _>>()?;
        if options.is_empty() {
            return Err("RADIO field lists no options".into());
        }
        return Ok(EntryKind::Radio { options });
    }
    let default = (!field.is_empty()).then(|| field.to_string());
    if scalar {
        Ok(EntryKind::ScalarVar { default })
    } else {
        Ok(EntryKind::FileUpload {
            default_path: default,
            binary: ends_with_ignore_case(begin, "BINARY"),
        })
    }
}

fn parse_radio_option(item: &str) -> Result<RadioOption, String> {
    let malformed = || format!("malformed RADIO option `{item}` (expected .Display,value)");
    let rest = item.strip_prefix('.').ok_or_else(malformed)?;
    let (display, value) = rest.split_once(',').ok_or_else(malformed)?;
    if display.is_empty() || value.is_empty() {
        return Err(malformed());
    }
    Ok(RadioOption {
        display: display.to_string(),
        value: value.to_string(),
    })
}

/// Converts CRLF and lone CR to LF.
pub fn normalize_line_endings(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        match data[i] {
            b'\r' => {
                out.push(b'\n');
                if data.get(i + 1) == Some(&b'\n') {
                    i += 1;
                }
            }
            b => out.push(b),
        }
        i += 1;
    }
    out
}

/// Decompresses gzip (`1F 8B`) or compress (`1F 9D`) data. Anything that is
/// not recognized, or fails to decode, is returned unchanged.
pub fn maybe_decompress(data: &[u8]) -> Vec<u8> {
    match data {
        [0x1f, 0x8b, ..] => {
            let mut out = Vec::new();
            match flate2::read::MultiGzDecoder::new(data).read_to_end(&mut out) {
                Ok(_) => out,
                Err(_) => data.to_vec(),
            }
        }
        [0x1f, 0x9d, ..] => lzw::decompress(data).unwrap_or_else(|| data.to_vec()),
        _ => data.to_vec(),
    }
}

struct Lines<'a> {
    data: &'a [u8],
    pos: usize,
}

struct Line<'a> {
    start: usize,
    text: &'a [u8],
    next: usize,
}

impl<'a> Lines<'a> {
    /// Next line; terminators are LF, CRLF or a lone CR.
    fn next_line(&mut self) -> Option<Line<'a>> {
        if self.pos >= self.data.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.data[start..];
        let (len, term) = match rest.iter().position(|&b| b == b'\n' || b == b'\r') {
            Some(i) if rest[i] == b'\r' && rest.get(i + 1) == Some(&b'\n') => (i, 2),
            Some(i) => (i, 1),
            None => (rest.len(), 0),
        };
        self.pos = start + len + term;
        Some(Line {
            start,
            text: &rest[..len],
            next: self.pos,
        })
    }
}

fn trim(bytes: &[u8]) -> &[u8] {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace());
    match start {
        None => &[],
        Some(s) => {
            let e = bytes
                .iter()
                .rposition(|b| !b.is_ascii_whitespace())
                .unwrap();
            &bytes[s..=e]
        }
    }
}

/// Splits a trimmed line into its first word and the remainder. The word
/// ends at whitespace or `=`.
fn split_word(line: &[u8]) -> (&[u8], &[u8]) {
    let end = line
        .iter()
        .position(|&b| b.is_ascii_whitespace() || b == b'=')
        .unwrap_or(line.len());
    (&line[..end], &line[end..])
}

/// `token[123]` -> (`token`, 123)
fn parse_sized(word: &[u8]) -> Option<(&[u8], usize)> {
    let open = word.iter().position(|&b| b == b'[')?;
    if word.last() != Some(&b']') || open == 0 {
        return None;
    }
    let digits = &word[open + 1..word.len() - 1];
    if digits.is_empty() || !digits.iter().all(u8::is_ascii_digit) {
        return None;
    }
    let size = std::str::from_utf8(digits).ok()?.parse().ok()?;
    Some((&word[..open], size))
}

fn scalar_value(rest: &[u8]) -> &[u8] {
    let rest = trim(rest);
    match rest.first() {
        Some(b'=') => trim(&rest[1..]),
        _ => rest,
    }
}

fn ends_with_ignore_case(s: &str, suffix: &str) -> bool {
    s.len() >= suffix.len()
        && s.as_bytes()[s.len() - suffix.len()..].eq_ignore_ascii_case(suffix.as_bytes())
}

/// Parses a submission body (everything after the mail-style header) into
/// per-file sections. Lines that match no token are ignored; a line reading
/// `END-SERVER-INPUT` or the end of the data terminates the body.
pub fn parse_submission(body: &[u8], config: &TokenConfig) -> Result<SubmissionFields, TokenError> {
    let mut fields = SubmissionFields::default();
    let mut lines = Lines { data: body, pos: 0 };
    while let Some(line) = lines.next_line() {
        let text = trim(line.text);
        if text.is_empty() {
            continue;
        }
        if text.eq_ignore_ascii_case(END_OF_INPUT.as_bytes()) {
            break;
        }
        let (word, rest) = split_word(text);

        if let Some((token, size)) = parse_sized(word) {
            if let Some(entry) = config.by_begin(token) {
                let available = body.len() - line.next;
                if size > available {
                    return Err(TokenError::TruncatedSection {
                        token: entry.begin_token.clone(),
                        declared: size,
                        available,
                    });
                }
                let raw = &body[line.next..line.next + size];
                lines.pos = line.next + size;
                skip_matching_end(&mut lines, entry);
                store_section(&mut fields, entry, raw);
                continue;
            }
        }

        if word.eq_ignore_ascii_case(b"TYPE") {
            fields.solver_type = String::from_utf8_lossy(scalar_value(rest)).into_owned();
            continue;
        }
        if word.eq_ignore_ascii_case(b"SOLVER") {
            fields.solver_id = String::from_utf8_lossy(scalar_value(rest)).into_owned();
            continue;
        }

        let Some(entry) = config.by_begin(word) else {
            continue;
        };
        match &entry.end_token {
            None => store_section(&mut fields, entry, scalar_value(rest)),
            Some(end) => {
                let content_start = line.next;
                let mut content_end = None;
                while let Some(inner) = lines.next_line() {
                    if trim(inner.text).eq_ignore_ascii_case(end.as_bytes()) {
                        content_end = Some(inner.start);
                        break;
                    }
                }
                let Some(content_end) = content_end else {
                    return Err(TokenError::UnterminatedSection(entry.begin_token.clone()));
                };
                store_section(&mut fields, entry, &body[content_start..content_end]);
            }
        }
    }
    Ok(fields)
}

/// After sized content, an optional end token on the next non-blank line
/// belongs to the same section.
fn skip_matching_end(lines: &mut Lines<'_>, entry: &TokenConfigEntry) {
    let Some(end) = &entry.end_token else {
        return;
    };
    let saved = lines.pos;
    while let Some(line) = lines.next_line() {
        let text = trim(line.text);
        if text.is_empty() {
            continue;
        }
        if text.eq_ignore_ascii_case(end.as_bytes()) {
            return;
        }
        break;
    }
    lines.pos = saved;
}

fn store_section(fields: &mut SubmissionFields, entry: &TokenConfigEntry, raw: &[u8]) {
    let data = if entry.is_binary() {
        raw.to_vec()
    } else {
        normalize_line_endings(&maybe_decompress(raw))
    };
    if fields
        .sections
        .insert(entry.target_file.clone(), data)
        .is_some()
    {
        warn!(
            "section `{}` given more than once; keeping the last occurrence",
            entry.begin_token
        );
    }
}

fn inline_scalar_ok(value: &[u8]) -> bool {
    !value.iter().any(|&b| b == b'\n' || b == b'\r') && trim(value) == value
}

/// Renders a submission that [`parse_submission`] maps back to `fields`.
/// File and text sections use the sized form; scalar values are written as
/// `token = value` when they fit on one line.
pub fn format_submission(
    fields: &SubmissionFields,
    config: &TokenConfig,
) -> Result<Vec<u8>, TokenError> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("TYPE {}\n", fields.solver_type).as_bytes());
    out.extend_from_slice(format!("SOLVER {}\n", fields.solver_id).as_bytes());
    for (target, data) in &fields.sections {
        let entry = config
            .by_target(target)
            .ok_or_else(|| TokenError::UnknownField(target.clone()))?;
        if entry.is_scalar() && inline_scalar_ok(data) {
            out.extend_from_slice(entry.begin_token.as_bytes());
            out.extend_from_slice(b" = ");
            out.extend_from_slice(data);
            out.push(b'\n');
        } else {
            out.extend_from_slice(format!("{}[{}]\n", entry.begin_token, data.len()).as_bytes());
            out.extend_from_slice(data);
            out.push(b'\n');
        }
    }
    out.extend_from_slice(END_OF_INPUT.as_bytes());
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INTRO_CONFIG: &str = "Your 1st file::begin.a:end.a:A\n\
                                Your 2nd file::begin.b:end.b:B\n\
                                Your 3rd file::begin.c:end.c:C\n";

    const EXAMPLE_CONFIG: &str = "\
Objective source: fcn.c: begin.func: end.func: FCN
Language: RADIO .C,c .Fortran,fortran: lang: null: LANG
Number of variables: : NumVars: NULL: NumVars
Use alternative algorithm?: BINARY-OFF: AlgB: null: AlgB
Job label: TEXT: BEGIN.COMMENT: END.COMMENT: COMMENTS
";

    const EXAMPLE_SUBMISSION: &str = "TYPE MISC
SOLVER MINE

begin.func
double fcn(double *x, int n) {
    double f = 0.0;
    for(int i=0; i<n; i++)
        f += x[i] * x[i];
    return f;
}
end.func

lang = c
NumVars  = 10
AlgB     = no

begin.comment
A simple example.
end.comment

END-SERVER-INPUT
";

    fn cfg(text: &str) -> TokenConfig {
        parse_token_config(text.as_bytes()).unwrap()
    }

    #[test]
    fn intro_config_line() {
        let c = cfg("Your 1st file::begin.a:end.a:A");
        assert_eq!(
            c.entries()[0],
            TokenConfigEntry {
                label: "Your 1st file".into(),
                kind: EntryKind::FileUpload {
                    default_path: None,
                    binary: false
                },
                begin_token: "begin.a".into(),
                end_token: Some("end.a".into()),
                target_file: "A".into(),
            }
        );
    }

    #[test]
    fn example_config_kinds() {
        let c = cfg(EXAMPLE_CONFIG);
        assert_eq!(c.len(), 5);
        let e = c.entries();
        assert_eq!(
            e[0].kind,
            EntryKind::FileUpload {
                default_path: Some("fcn.c".into()),
                binary: false
            }
        );
        assert_eq!(
            e[1].kind,
            EntryKind::Radio {
                options: vec![
                    RadioOption {
                        display: "C".into(),
                        value: "c".into()
                    },
                    RadioOption {
                        display: "Fortran".into(),
                        value: "fortran".into()
                    },
                ]
            }
        );
        assert!(e[1].is_scalar());
        assert_eq!(e[1].target_file, "LANG");
        assert_eq!(e[2].kind, EntryKind::ScalarVar { default: None });
        assert_eq!(e[3].kind, EntryKind::BinaryToggle { default_on: false });
        assert!(e[3].is_scalar());
        assert_eq!(e[4].kind, EntryKind::TextArea);
        assert_eq!(e[4].end_token.as_deref(), Some("END.COMMENT"));
    }

    #[test]
    fn empty_and_blank_configs() {
        assert!(cfg("").is_empty());
        assert!(cfg("\n   \n\r\n").is_empty());
        assert_eq!(cfg(&format!("\n{INTRO_CONFIG}\n\n")).len(), 3);
    }

    #[test]
    fn binary_flag_follows_begin_token() {
        let c = cfg("Data::begin.dataBinary:end.data:data.bin\nText::begin.t:end.t:t");
        assert!(matches!(
            c.entries()[0].kind,
            EntryKind::FileUpload { binary: true, .. }
        ));
        assert!(c.entries()[0].is_binary());
        assert!(!c.entries()[1].is_binary());
    }

    #[test]
    fn config_errors() {
        let err = parse_token_config(b"ok::b:e:F\nonly:three:fields").unwrap_err();
        assert!(
            matches!(err, TokenError::ConfigSyntax { line: 2, .. }),
            "{err:?}"
        );
        let err = parse_token_config(b"a::b1:e1:F\nb::b2:e2:F").unwrap_err();
        assert_eq!(
            err,
            TokenError::DuplicateTarget {
                line: 2,
                target: "F".into()
            }
        );
        let err = parse_token_config(b"a:::e1:F").unwrap_err();
        assert!(matches!(err, TokenError::ConfigSyntax { line: 1, .. }));
        let err = parse_token_config(b"a:RADIO C,c: x: null: X").unwrap_err();
        assert!(matches!(err, TokenError::ConfigSyntax { .. }));
        let err = parse_token_config(b"a:RADIO: x: null: X").unwrap_err();
        assert!(matches!(err, TokenError::ConfigSyntax { .. }));
        let err = parse_token_config(b"a::type:null:X").unwrap_err();
        assert!(matches!(err, TokenError::ConfigSyntax { .. }));
        let err = parse_token_config(b"a::x:null:").unwrap_err();
        assert!(matches!(err, TokenError::ConfigSyntax { .. }));
    }

    #[test]
    fn parses_full_example_submission() {
        let c = cfg(EXAMPLE_CONFIG);
        let f = parse_submission(EXAMPLE_SUBMISSION.as_bytes(), &c).unwrap();
        assert_eq!(f.solver_type, "MISC");
        assert_eq!(f.solver_id, "MINE");
        let s = &f.sections;
        assert_eq!(s.len(), 5);
        assert_eq!(
            s["FCN"],
            b"double fcn(double *x, int n) {\n    double f = 0.0;\n    for(int i=0; i<n; i++)\n        f += x[i] * x[i];\n    return f;\n}\n"
        );
        assert_eq!(s["LANG"], b"c");
        assert_eq!(s["NumVars"], b"10");
        assert_eq!(s["AlgB"], b"no");
        assert_eq!(s["COMMENTS"], b"A simple example.\n");
    }

    #[test]
    fn intro_submission_with_indentation_and_trailing_space() {
        let c = cfg(INTRO_CONFIG);
        let body = b"begin.a\n  contents of 1st file\nend.a\nbegin.b\n  contents of 2nd file\nend.b\nbegin.c\n  contents of 3rd file\nend.c \n";
        let f = parse_submission(body, &c).unwrap();
        assert_eq!(f.sections["A"], b"  contents of 1st file\n");
        assert_eq!(f.sections["C"], b"  contents of 3rd file\n");
    }

    #[test]
    fn nothing_recognized_gives_empty_map() {
        let c = cfg(INTRO_CONFIG);
        let f = parse_submission(b"hello\nworld\n", &c).unwrap();
        assert!(f.sections.is_empty());
        let f = parse_submission(b"", &c).unwrap();
        assert!(f.sections.is_empty());
    }

    #[test]
    fn end_server_input_stops_parsing() {
        let c = cfg(INTRO_CONFIG);
        let f = parse_submission(
            b"begin.a\nx\nend.a\nEND-SERVER-INPUT\nbegin.b\ny\nend.b\n",
            &c,
        )
        .unwrap();
        assert_eq!(f.sections.keys().collect::<Vec<_>>(), ["A"]);
    }

    #[test]
    fn tokens_are_case_insensitive_targets_are_not() {
        let c = cfg("Lbl::Begin.Data:End.Data:MyFile");
        let f = parse_submission(b"BEGIN.DATA\nq\nend.data\n", &c).unwrap();
        assert_eq!(f.sections["MyFile"], b"q\n");
    }

    #[test]
    fn sized_section_wins_over_end_token() {
        let c = cfg(INTRO_CONFIG);
        // the content itself contains the end token
        let f = parse_submission(b"begin.a[12]\nend.a\nend.a\n\nend.a\n", &c).unwrap();
        assert_eq!(f.sections["A"], b"end.a\nend.a\n");
        let f = parse_submission(b"begin.a[3]\nabcend.a\nbegin.b[0]\n\n", &c).unwrap();
        assert_eq!(f.sections["A"], b"abc");
        assert_eq!(f.sections["B"], b"");
    }

    #[test]
    fn parse_errors() {
        let c = cfg(INTRO_CONFIG);
        assert_eq!(
            parse_submission(b"begin.a\nno end here\n", &c),
            Err(TokenError::UnterminatedSection("begin.a".into()))
        );
        assert_eq!(
            parse_submission(b"begin.b[10]\nshort", &c),
            Err(TokenError::TruncatedSection {
                token: "begin.b".into(),
                declared: 10,
                available: 5
            })
        );
    }

    #[test]
    fn scalar_forms() {
        let c = cfg("n: : NumVars: NULL: N\nm: : other: NULL: M");
        let f = parse_submission(b"numvars 7\nother=a=b\n", &c).unwrap();
        assert_eq!(f.sections["N"], b"7");
        assert_eq!(f.sections["M"], b"a=b");
    }

    #[test]
    fn duplicate_section_last_wins() {
        let c = cfg(INTRO_CONFIG);
        let f = parse_submission(b"begin.a\n1\nend.a\nbegin.a\n2\nend.a\n", &c).unwrap();
        assert_eq!(f.sections["A"], b"2\n");
    }

    #[test]
    fn dos_and_mac_bodies_are_normalized() {
        let c = cfg(INTRO_CONFIG);
        let f =
            parse_submission(b"begin.a\r\nx\r\ny\r\nend.a\r\nbegin.b\rp\rq\rend.b\r", &c).unwrap();
        assert_eq!(f.sections["A"], b"x\ny\n");
        assert_eq!(f.sections["B"], b"p\nq\n");
    }

    #[test]
    fn binary_sections_untouched() {
        let c = cfg("Data::begin.dataBINARY:end.data:blob");
        let payload: Vec<u8> = (0..=255u8).collect();
        let mut body = format!("begin.databinary[{}]\n", payload.len()).into_bytes();
        body.extend_from_slice(&payload);
        body.extend_from_slice(b"\nEND-SERVER-INPUT\n");
        let f = parse_submission(&body, &c).unwrap();
        assert_eq!(f.sections["blob"], payload);
    }

    #[test]
    fn compressed_text_sections_are_expanded() {
        use std::io::Write;
        let c = cfg(INTRO_CONFIG);
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(b"line one\r\nline two\r\n").unwrap();
        let gz = gz.finish().unwrap();
        let mut body = format!("begin.a[{}]\n", gz.len()).into_bytes();
        body.extend_from_slice(&gz);
        body.push(b'\n');
        let f = parse_submission(&body, &c).unwrap();
        assert_eq!(f.sections["A"], b"line one\nline two\n");

        // compress(1) output of "a"
        let z = [0x1f, 0x9d, 0x90, 0x61, 0x00];
        let mut body = format!("begin.b[{}]\n", z.len()).into_bytes();
        body.extend_from_slice(&z);
        let f = parse_submission(&body, &c).unwrap();
        assert_eq!(f.sections["B"], b"a");

        // looks compressed, is not: passed through
        let fake = [0x1f, 0x8b, b'x'];
        assert_eq!(maybe_decompress(&fake), fake);
    }

    #[test]
    fn format_uses_exact_sized_tokens() {
        let c = cfg(INTRO_CONFIG);
        let mut f = SubmissionFields {
            solver_type: "MISC".into(),
            solver_id: "MINE".into(),
            ..Default::default()
        };
        f.sections.insert("A".into(), b"x\n".to_vec());
        let out = format_submission(&f, &c).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("\nbegin.a[2]\nx\n"), "{text}");
    }

    #[test]
    fn format_empty_map() {
        let out = format_submission(&SubmissionFields::default(), &cfg(INTRO_CONFIG)).unwrap();
        assert_eq!(out, b"TYPE \nSOLVER \nEND-SERVER-INPUT\n");
    }

    #[test]
    fn format_unknown_field() {
        let mut f = SubmissionFields::default();
        f.sections.insert("Z".into(), vec![]);
        assert_eq!(
            format_submission(&f, &cfg(INTRO_CONFIG)),
            Err(TokenError::UnknownField("Z".into()))
        );
    }

    #[test]
    fn scalars_format_inline_or_sized() {
        let c = cfg("n: : NumVars: NULL: N\nm: : other: NULL: M");
        let mut f = SubmissionFields::default();
        f.sections.insert("N".into(), b"10".to_vec());
        f.sections.insert("M".into(), b" two\nlines ".to_vec());
        let out = format_submission(&f, &c).unwrap();
        let text = String::from_utf8_lossy(&out);
        assert!(text.contains("NumVars = 10\n"));
        assert!(text.contains("other[11]\n"));
        assert_eq!(parse_submission(&out, &c).unwrap().sections, f.sections);
    }

    #[test]
    fn all_byte_values_round_trip() {
        let c = cfg("Data::begin.dataBINARY:end.data:blob");
        let mut f = SubmissionFields::default();
        let payload: Vec<u8> = (0..=255u8).cycle().take(1024).collect();
        f.sections.insert("blob".into(), payload);
        let back = parse_submission(&format_submission(&f, &c).unwrap(), &c).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_line_endings(b"a\r\nb\r"), b"a\nb\n");
        assert_eq!(normalize_line_endings(b"a\nb\n"), b"a\nb\n");
        assert_eq!(normalize_line_endings(b"\r\r\n\n"), b"\n\n\n");
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_idempotent(data in proptest::collection::vec(any::<u8>(), 0..256)) {
                let once = normalize_line_endings(&data);
                prop_assert_eq!(normalize_line_endings(&once), once.clone());
                prop_assert!(!once.contains(&b'\r'));
            }

            #[test]
            fn config_entry_count_matches_lines(
                n in 0usize..20,
                blanks in proptest::collection::vec(0usize..3, 20),
            ) {
                let mut text = String::new();
                for (i, &b) in blanks.iter().enumerate().take(n) {
                    for _ in 0..b { text.push_str("  \n"); }
                    text.push_str(&format!("Field {i}: : begin.f{i} : end.f{i} : F{i}\n"));
                }
                prop_assert_eq!(parse_token_config(text.as_bytes()).unwrap().len(), n);
            }
        }
    }
}
