//! Byte-level decoding of streamed completions.
//!
//! openai dialect: SSE. Only lines that begin with `data: ` carry payloads; every
//! other line (comments, `event:`, blank separators) is skipped. `data: [DONE]`
//! terminates the stream.
//!
//! ollama dialect: one JSON object per line; the object with `"done": true` is terminal.
//!
//! Lines are split on `\n` before UTF-8 decoding (a trailing `\r` is dropped), so
//! multi-byte characters split across network chunks are reassembled correctly.

use serde::Deserialize;

use super::{Dialect, FinishReason, TokenEvent};

#[derive(Debug)]
pub struct StreamDecoder {
    dialect: Dialect,
    buf: Vec<u8>,
    finish: Option<FinishReason>,
    done: bool,
}

#[derive(Deserialize)]
struct OpenAiChunk {
    #[serde(default)]
    choices: Vec<OpenAiChoice>,
    #[serde(default)]
    error: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct OpenAiChoice {
    #[serde(default)]
    delta: Option<OpenAiDelta>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct OpenAiDelta {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct OllamaChunk {
    #[serde(default)]
    message: Option<OllamaMessage>,
    #[serde(default)]
    done: bool,
    #[serde(default)]
    done_reason: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct OllamaMessage {
    #[serde(default)]
    content: String,
}

fn finish_from(s: &str) -> FinishReason {
    if s == "length" {
        FinishReason::Length
    } else {
        FinishReason::Stop
    }
}

impl StreamDecoder {
    pub fn new(dialect: Dialect) -> Self {
        Self { dialect, buf: Vec::new(), finish: None, done: false }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Consume a chunk of bytes and return the events completed by it.
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<TokenEvent> {
        let mut out = Vec::new();
        if self.done {
            return out;
        }
        self.buf.extend_from_slice(bytes);
        while let Some(nl) = self.buf.iter().position(|&b| b == b'\n') {
            let mut line: Vec<u8> = self.buf.drain(..=nl).collect();
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
            self.line(&line, &mut out);
            if self.done {
                self.buf.clear();
                break;
            }
        }
        out
    }

    /// Called at end of input. Returns the terminal event when the stream ended
    /// without one (which is an error for both dialects).
    pub fn finish(&mut self) -> Vec<TokenEvent> {
        let mut out = Vec::new();
        if self.done {
            return out;
        }
        if !self.buf.is_empty() {
            let line = std::mem::take(&mut self.buf);
            self.line(&line, &mut out);
        }
        if !self.done {
            self.done = true;
            out.push(TokenEvent::failed("stream ended before its terminal event"));
        }
        out
    }

    fn line(&mut self, line: &[u8], out: &mut Vec<TokenEvent>) {
        match self.dialect {
            Dialect::OpenAi | Dialect::Mock => self.sse_line(line, out),
            Dialect::Ollama => self.ndjson_line(line, out),
        }
    }

    fn fail(&mut self, msg: String, out: &mut Vec<TokenEvent>) {
        self.done = true;
        out.push(TokenEvent::failed(msg));
    }

    fn sse_line(&mut self, line: &[u8], out: &mut Vec<TokenEvent>) {
        let Some(payload) = line.strip_prefix(b"data: ") else {
            return;
        };
        if payload == b"[DONE]" {
            self.done = true;
            out.push(TokenEvent::finish(self.finish.unwrap_or(FinishReason::Stop)));
            return;
        }
        let chunk: OpenAiChunk = match serde_json::from_slice(payload) {
            Ok(c) => c,
            Err(e) => return self.fail(format!("malformed stream chunk: {e}"), out),
        };
        if let Some(err) = chunk.error {
            return self.fail(format!("provider error: {err}"), out);
        }
        for choice in chunk.choices {
            if let Some(text) = choice.delta.and_then(|d| d.content) {
                if !text.is_empty() {
                    out.push(TokenEvent::delta(text));
                }
            }
            if let Some(reason) = choice.finish_reason {
                self.finish = Some(finish_from(&reason));
            }
        }
    }

    fn ndjson_line(&mut self, line: &[u8], out: &mut Vec<TokenEvent>) {
        if line.iter().all(u8::is_ascii_whitespace) {
            return;
        }
        let chunk: OllamaChunk = match serde_json::from_slice(line) {
            Ok(c) => c,
            Err(e) => return self.fail(format!("malformed stream chunk: {e}"), out),
        };
        if let Some(err) = chunk.error {
            return self.fail(format!("provider error: {err}"), out);
        }
        if let Some(m) = chunk.message {
            if !m.content.is_empty() {
                out.push(TokenEvent::delta(m.content));
            }
        }
        if chunk.done {
            self.done = true;
            let reason = chunk.done_reason.as_deref().map(finish_from).unwrap_or(FinishReason::Stop);
            out.push(TokenEvent::finish(reason));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(dialect: Dialect, chunks: &[&[u8]]) -> Vec<TokenEvent> {
        let mut d = StreamDecoder::new(dialect);
        let mut out = Vec::new();
        for c in chunks {
            out.extend(d.feed(c));
        }
        out.extend(d.finish());
        out
    }

    #[test]
    fn sse_basic_stream() {
        let body = b"data: {\"choices\":[{\"delta\":{\"content\":\"Hel\"}}]}\n\n\
data: {\"choices\":[{\"delta\":{\"content\":\"lo\"},\"finish_reason\":\"length\"}]}\n\n\
data: [DONE]\n\n";
        let ev = run(Dialect::OpenAi, &[body]);
        assert_eq!(
            ev,
            vec![
                TokenEvent::delta("Hel"),
                TokenEvent::delta("lo"),
                TokenEvent::finish(FinishReason::Length)
            ]
        );
    }

    #[test]
    fn sse_ignores_non_data_lines_and_crlf() {
        let body = b": keepalive\r\nevent: message\r\ndata: {\"choices\":[{\"delta\":{\"content\":\"x\"}}]}\r\n\r\ndata: [DONE]\r\n";
        let ev = run(Dialect::OpenAi, &[body]);
        assert_eq!(ev, vec![TokenEvent::delta("x"), TokenEvent::finish(FinishReason::Stop)]);
    }

    #[test]
    fn sse_requires_space_after_colon() {
        let ev = run(Dialect::OpenAi, &[b"data:[DONE]\n"]);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].finish_reason, Some(FinishReason::Error));
    }

    #[test]
    fn utf8_split_across_chunks() {
        let line = "data: {\"choices\":[{\"delta\":{\"content\":\"é😀\"}}]}\ndata: [DONE]\n";
        let bytes = line.as_bytes();
        let chunks: Vec<&[u8]> = bytes.chunks(3).collect();
        let ev = run(Dialect::OpenAi, &chunks);
        assert_eq!(ev[0], TokenEvent::delta("é😀"));
        assert!(ev[1].done);
    }

    #[test]
    fn malformed_chunk_is_terminal_error() {
        let ev = run(Dialect::OpenAi, &[b"data: {nope\ndata: [DONE]\n"]);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].finish_reason, Some(FinishReason::Error));
    }

    #[test]
    fn missing_done_is_error() {
        let ev = run(Dialect::OpenAi, &[b"data: {\"choices\":[{\"delta\":{\"content\":\"a\"}}]}\n"]);
        assert_eq!(ev.last().unwrap().finish_reason, Some(FinishReason::Error));
    }

    #[test]
    fn ndjson_stream() {
        let body = b"{\"message\":{\"role\":\"assistant\",\"content\":\"hi\"},\"done\":false}\n\
{\"message\":{\"role\":\"assistant\",\"content\":\" there\"},\"done\":false}\n\
{\"done\":true,\"done_reason\":\"stop\"}\n";
        let ev = run(Dialect::Ollama, &[&body[..10], &body[10..]]);
        assert_eq!(
            ev,
            vec![
                TokenEvent::delta("hi"),
                TokenEvent::delta(" there"),
                TokenEvent::finish(FinishReason::Stop)
            ]
        );
    }

    #[test]
    fn ndjson_error_object() {
        let ev = run(Dialect::Ollama, &[b"{\"error\":\"model not found\"}\n"]);
        assert_eq!(ev.len(), 1);
        assert!(ev[0].error.as_deref().unwrap().contains("model not found"));
    }

    #[test]
    fn ndjson_terminal_without_newline() {
        let ev = run(Dialect::Ollama, &[b"{\"done\":true,\"done_reason\":\"length\"}"]);
        assert_eq!(ev, vec![TokenEvent::finish(FinishReason::Length)]);
    }
}
