// One live chat call through a bundled identity. Does nothing unless
// STUDYSIM_LIVE is set and the provider's key is in the environment.

use studysim::provider::{
    builtin_identities, chat_with_retry, ChatMessage, ChatRequest, HttpProvider, RetryPolicy,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    if std::env::var_os("STUDYSIM_LIVE").is_none() {
        println!("STUDYSIM_LIVE is unset, skipping the live call");
        return Ok(());
    }
    let identity = builtin_identities()
        .into_iter()
        .find(|i| i.id == "gpt-4o")
        .expect("bundled identity");
    let provider = match HttpProvider::from_env(identity) {
        Ok(p) => p,
        Err(e) => {
            println!("skipping: {e}");
            return Ok(());
        }
    };
    let req = ChatRequest::new(
        "gpt-4o",
        "example/live",
        vec![
            ChatMessage::system("You are a terse assistant."),
            ChatMessage::user("Reply with the single word: ready"),
        ],
    )
    .with_temperature(0.0);
    let reply = chat_with_retry(&provider, &req, &RetryPolicy::default())?;
    println!(
        "{} (after {} retries)",
        reply.response.text,
        reply.retries()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
