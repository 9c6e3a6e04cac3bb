//! Newline-delimited JSON records.
//!
//! Request `{"id":u64,"input":[f64...]}`; success `{"id":u64,"features":[...]}`;
//! failure `{"id":u64|null,"error":CODE}`. Floats are written with 17
//! significant digits, which round-trips every finite `f64` exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUDGET_EXHAUSTED: &str = "BUDGET_EXHAUSTED";
pub const MALFORMED_INPUT: &str = "MALFORMED_INPUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: u64,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Features { id: u64, features: Vec<f64> },
    Error { id: Option<u64>, code: String },
}

impl Response {
    pub fn id(&self) -> Option<u64> {
        match self {
            Response::Features { id, .. } => Some(*id),
            Response::Error { id, .. } => *id,
        }
    }

    pub fn into_result(self) -> Result<Vec<f64>> {
        match self {
            Response::Features { features, .. } => Ok(features),
            Response::Error { code, .. } => Err(error_from_code(&code)),
        }
    }
}

pub fn error_from_code(code: &str) -> Error {
    match code {
        BUDGET_EXHAUSTED => Error::BudgetExhausted,
        MALFORMED_INPUT => Error::MalformedInput("rejected by service".into()),
        other => Error::Protocol(format!("unknown error code `{other}`")),
    }
}

pub fn code_for(err: &Error) -> &'static str {
    match err {
        Error::BudgetExhausted => BUDGET_EXHAUSTED,
        _ => MALFORMED_INPUT,
    }
}

/// `{:.16e}` gives 17 significant digits and is valid JSON number syntax.
fn push_float(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

pub fn encode_request(id: u64, input: &[f64]) -> String {
    let mut s = format!("{{\"id\":{id},\"input\":[");
    for (i, v) in input.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        push_float(&mut s, *v);
    }
    s.push_str("]}");
    s
}

pub fn encode_response(resp: &Response) -> String {
    match resp {
        Response::Features { id, features } => {
            let mut s = format!("{{\"id\":{id},\"features\":[");
            for (i, v) in features.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                push_float(&mut s, *v);
            }
            s.push_str("]}");
            s
        }
        Response::Error { id, code } => match id {
            Some(id) => format!("{{\"id\":{id},\"error\":\"{code}\"}}"),
            None => format!("{{\"id\":null,\"error\":\"{code}\"}}"),
        },
    }
}

/// Parses a request line. On failure returns the id if one could be salvaged.
pub fn decode_request(line: &str) -> std::result::Result<Request, Option<u64>> {
    match serde_json::from_str::<Request>(line) {
        Ok(r) => Ok(r),
        Err(_) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
            Err(id)
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResponse {
    id: Option<u64>,
    features: Option<Vec<f64>>,
    error: Option<String>,
}

pub fn decode_response(line: &str) -> Result<Response> {
    let raw: RawResponse =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("bad response line: {e}")))?;
    match (raw.id, raw.features, raw.error) {
        (Some(id), Some(features), None) => Ok(Response::Features { id, features }),
        (id, None, Some(code)) => Ok(Response::Error { id, code }),
        _ => Err(Error::Protocol(format!("response is neither features nor error: {line}"))),
    }
}
