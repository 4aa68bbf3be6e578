//! Remote logit provider.
//!
//! `GET {base}/vocab` returns `{tokens, vocab_hash}`; `POST {base}{path}` with
//! `{model_id, context_tokens}` returns `{logits, vocab_hash}`. The hash is the
//! hex SHA-256 of the tokens joined by `\n`; any disagreement is fatal. A
//! `null` logit means `-inf`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LogitProvider, ProviderError, Vocab};
use crate::http::{Endpoint, JsonClient};

pub fn vocab_hash(tokens: &[String]) -> String {
    hex::encode(Sha256::digest(tokens.join("\n").as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VocabResponse {
    pub tokens: Vec<String>,
    pub vocab_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogitRequest {
    pub model_id: String,
    pub context_tokens: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogitResponse {
    /// `null` stands for `-inf`, which JSON cannot express.
    pub logits: Vec<Option<f64>>,
    pub vocab_hash: String,
}

pub struct HttpLogitProvider {
    client: JsonClient,
    model_id: String,
    vocab: Vocab,
    hash: String,
}

impl HttpLogitProvider {
    /// Fetches and verifies the vocabulary.
    pub fn connect(endpoint: Endpoint, model_id: impl Into<String>) -> Result<Self, ProviderError> {
        let client = JsonClient::new(endpoint).map_err(ProviderError::Transport)?;
        let resp: VocabResponse = client.get("/vocab").map_err(ProviderError::Transport)?;
        let local = vocab_hash(&resp.tokens);
        if local != resp.vocab_hash {
            return Err(ProviderError::VocabMismatch {
                expected: local,
                found: resp.vocab_hash,
            });
        }
        Ok(Self {
            client,
            model_id: model_id.into(),
            vocab: Vocab::new(resp.tokens)?,
            hash: local,
        })
    }
}

impl LogitProvider for HttpLogitProvider {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn logits(&self, context: &[usize]) -> Result<Vec<f64>, ProviderError> {
        let path = match self.client.endpoint().path.as_str() {
            "" => "/logits".to_string(),
            p => p.to_string(),
        };
        let req = LogitRequest {
            model_id: self.model_id.clone(),
            context_tokens: context.to_vec(),
        };
        let resp: LogitResponse = self.client.post(&path, &req).map_err(ProviderError::Transport)?;
        if resp.vocab_hash != self.hash {
            return Err(ProviderError::VocabMismatch {
                expected: self.hash.clone(),
                found: resp.vocab_hash,
            });
        }
        Ok(resp.logits.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}
