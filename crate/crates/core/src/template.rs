//! The three-tag response wire format and its format grade.
//!
//! A rendered response looks like
//!
//! ```text
//! <intention>song_search</intention>
//! <music>[{"song_name": "Common Jasmine Orange", "singer_name": "Jay Chou"}]</music>
//! <text>a summery pick</text>
//! ```
//!
//! Agentic trajectories prefix the response with one `<tool_call>` line per
//! call. The parser never fails; malformed input is expressed as a grade of
//! 0 (a required tag missing or unclosed) or 0.5 (all tags present but the
//! payload, order or multiplicity is wrong).

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intention {
    Chat,
    MusicChat,
    SongSearch,
    PlaybackControl,
}

impl Intention {
    pub fn as_str(self) -> &'static str {
        match self {
            Intention::Chat => "chat",
            Intention::MusicChat => "music_chat",
            Intention::SongSearch => "song_search",
            Intention::PlaybackControl => "playback_control",
        }
    }
}

impl fmt::Display for Intention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intention {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "chat" => Ok(Intention::Chat),
            "music_chat" => Ok(Intention::MusicChat),
            "song_search" => Ok(Intention::SongSearch),
            "playback_control" => Ok(Intention::PlaybackControl),
            _ => Err(()),
        }
    }
}

/// A `(song_name, singer_name)` pair as emitted by a policy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SongRef {
    pub song_name: String,
    pub singer_name: String,
}

impl SongRef {
    pub fn new(song_name: impl Into<String>, singer_name: impl Into<String>) -> Self {
        SongRef {
            song_name: song_name.into(),
            singer_name: singer_name.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub intention: Intention,
    pub music: Vec<SongRef>,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    MissingIntention,
    MissingMusic,
    MissingText,
    UnclosedTag,
    DuplicateTag,
    MisorderedTags,
    NestedTags,
    UnknownIntention,
    MalformedMusic,
    MusicIntentionMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatGrade {
    pub score: f64,
    pub defects: Vec<Defect>,
}

/// Whatever could be recovered from a raw string.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartialResponse {
    pub intention: Option<Intention>,
    pub music: Option<Vec<SongRef>>,
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parsed {
    /// Present only for grade-1 input.
    pub response: Option<StructuredResponse>,
    pub partial: PartialResponse,
    pub grade: FormatGrade,
}

impl Parsed {
    pub fn songs(&self) -> &[SongRef] {
        self.partial.music.as_deref().unwrap_or(&[])
    }
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<(/?)(intention|music|text|tool_call)>").expect("static regex"))
}

fn contains_tag(s: &str) -> bool {
    tag_regex().is_match(s)
}

fn check_renderable(response: &StructuredResponse) -> Result<()> {
    let is_search = response.intention == Intention::SongSearch;
    if is_search == response.music.is_empty() {
        return Err(Error::RenderRefused(format!(
            "intention {} with {} songs",
            response.intention,
            response.music.len()
        )));
    }
    if contains_tag(&response.text)
        || response
            .music
            .iter()
            .any(|m| contains_tag(&m.song_name) || contains_tag(&m.singer_name))
    {
        return Err(Error::RenderRefused("payload contains a reserved tag".into()));
    }
    Ok(())
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

pub fn render_music_payload(music: &[SongRef]) -> String {
    let items: Vec<String> = music
        .iter()
        .map(|m| {
            format!(
                "{{\"song_name\": {}, \"singer_name\": {}}}",
                json_str(&m.song_name),
                json_str(&m.singer_name)
            )
        })
        .collect();
    format!("[{}]", items.join(", "))
}

pub fn render(response: &StructuredResponse) -> Result<String> {
    check_renderable(response)?;
    let mut out = format!("<intention>{}</intention>\n", response.intention);
    if !response.music.is_empty() {
        out.push_str(&format!("<music>{}</music>\n", render_music_payload(&response.music)));
    }
    out.push_str(&format!("<text>{}</text>", response.text));
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct TagToken {
    name: &'static str,
    close: bool,
    start: usize,
    end: usize,
}

fn tokenize(raw: &str) -> Vec<TagToken> {
    tag_regex()
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).unwrap();
            let name = match &c[2] {
                "intention" => "intention",
                "music" => "music",
                "text" => "text",
                _ => "tool_call",
            };
            TagToken {
                name,
                close: !c[1].is_empty(),
                start: m.start(),
                end: m.end(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Span {
    Absent,
    Unclosed,
    Closed { open: TagToken, close: TagToken },
}

fn first_span(tokens: &[TagToken], name: &str) -> Span {
    let Some(oi) = tokens.iter().position(|t| t.name == name && !t.close) else {
        return Span::Absent;
    };
    match tokens[oi + 1..].iter().find(|t| t.name == name && t.close) {
        Some(c) => Span::Closed { open: tokens[oi], close: *c },
        None => Span::Unclosed,
    }
}

fn parse_music_payload(s: &str) -> Option<Vec<SongRef>> {
    let value: serde_json::Value = serde_json::from_str(s).ok()?;
    let items = value.as_array()?;
    items
        .iter()
        .map(|it| {
            let obj = it.as_object()?;
            Some(SongRef {
                song_name: obj.get("song_name")?.as_str()?.to_string(),
                singer_name: obj.get("singer_name")?.as_str()?.to_string(),
            })
        })
        .collect()
}

pub fn parse(raw: &str) -> Parsed {
    let tokens = tokenize(raw);
    let mut defects = Vec::new();
    let mut partial = PartialResponse::default();
    let mut fatal = false;

    let spans = ["intention", "music", "text"].map(|n| first_span(&tokens, n));
    let content = |sp: &Span| match sp {
        Span::Closed { open, close } => Some(&raw[open.end..close.start]),
        _ => None,
    };

    match spans[0] {
        Span::Absent => {
            fatal = true;
            defects.push(Defect::MissingIntention);
        }
        Span::Unclosed => {
            fatal = true;
            defects.push(Defect::UnclosedTag);
        }
        Span::Closed { .. } => match content(&spans[0]).unwrap().trim().parse::<Intention>() {
            Ok(i) => partial.intention = Some(i),
            Err(()) => defects.push(Defect::UnknownIntention),
        },
    }
    match spans[2] {
        Span::Absent => {
            fatal = true;
            defects.push(Defect::MissingText);
        }
        Span::Unclosed => {
            fatal = true;
            defects.push(Defect::UnclosedTag);
        }
        Span::Closed { .. } => partial.text = Some(content(&spans[2]).unwrap().to_string()),
    }
    match spans[1] {
        Span::Absent => {
            if partial.intention == Some(Intention::SongSearch) {
                fatal = true;
                defects.push(Defect::MissingMusic);
            }
        }
        Span::Unclosed => {
            fatal = true;
            defects.push(Defect::UnclosedTag);
        }
        Span::Closed { .. } => match parse_music_payload(content(&spans[1]).unwrap()) {
            Some(m) => partial.music = Some(m),
            None => defects.push(Defect::MalformedMusic),
        },
    }

    let closed: Vec<(TagToken, TagToken)> = spans
        .iter()
        .filter_map(|s| match s {
            Span::Closed { open, close } => Some((*open, *close)),
            _ => None,
        })
        .collect();
    if closed.windows(2).any(|w| w[0].0.start > w[1].0.start) {
        defects.push(Defect::MisorderedTags);
    }
    let overlapping = closed
        .iter()
        .enumerate()
        .any(|(i, a)| closed.iter().skip(i + 1).any(|b| a.0.start < b.1.end && b.0.start < a.1.end));
    let inner_tag = closed.iter().any(|(o, c)| {
        tokens
            .iter()
            .any(|t| t.start >= o.end && t.end <= c.start && t.name != "tool_call")
    });
    if overlapping || inner_tag {
        defects.push(Defect::NestedTags);
    }
    for name in ["intention", "music", "text"] {
        if tokens.iter().filter(|t| t.name == name && !t.close).count() > 1 {
            defects.push(Defect::DuplicateTag);
            break;
        }
    }
    if let (Some(intent), Some(music)) = (partial.intention, partial.music.as_ref()) {
        if (intent == Intention::SongSearch) == music.is_empty() {
            defects.push(Defect::MusicIntentionMismatch);
        }
    }

    let score = if fatal {
        0.0
    } else if defects.is_empty() {
        1.0
    } else {
        0.5
    };
    dedup_in_place(&mut defects);
    let response = (score == 1.0).then(|| StructuredResponse {
        intention: partial.intention.unwrap(),
        music: partial.music.clone().unwrap_or_default(),
        text: partial.text.clone().unwrap(),
    });
    Parsed {
        response,
        partial,
        grade: FormatGrade { score, defects },
    }
}

fn dedup_in_place(v: &mut Vec<Defect>) {
    let mut seen = Vec::with_capacity(v.len());
    v.retain(|d| {
        if seen.contains(d) {
            false
        } else {
            seen.push(*d);
            true
        }
    });
}

/// One rendered tool invocation line.
pub fn render_tool_call(tool: &str, args: &[(String, String)]) -> String {
    let args: Vec<String> = args
        .iter()
        .map(|(k, v)| format!("{}: {}", json_str(k), json_str(v)))
        .collect();
    format!("<tool_call>{{\"tool\": {}, \"args\": {{{}}}}}</tool_call>", json_str(tool), args.join(", "))
}

/// Extracts `(tool, args)` from every well-formed `<tool_call>` block.
pub fn parse_tool_calls(raw: &str) -> Vec<(String, Vec<(String, String)>)> {
    let tokens = tokenize(raw);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i];
        if t.name == "tool_call" && !t.close {
            if let Some(c) = tokens[i + 1..].iter().find(|c| c.name == "tool_call" && c.close) {
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(&raw[t.end..c.start]) {
                    let tool = v.get("tool").and_then(|x| x.as_str());
                    let args = v.get("args").and_then(|x| x.as_object());
                    if let (Some(tool), Some(args)) = (tool, args) {
                        let args = args
                            .iter()
                            .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
                            .collect();
                        out.push((tool.to_string(), args));
                    }
                }
            }
        }
        i += 1;
    }
    out
}
