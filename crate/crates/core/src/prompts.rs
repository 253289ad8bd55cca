//! Prompt templates for every model-facing exchange in the pipeline.
//!
//! Builders return full message lists so callers and tests construct the
//! exact same requests (the mock backend keys replies on request
//! fingerprints).

use crate::gateway::ChatMessage;

/// Control token the simulated user emits once its intent is fulfilled.
/// Stripped from storage; terminates the conversation loop.
pub const STOP_MARKER: &str = "###STOP###";

/// Re-prompt sent after a reply that violated a strict JSON format.
pub const JSON_REPROMPT: &str =
    "Your previous reply did not follow the required format. Reply with ONLY the required JSON object and nothing else.";

/// Re-prompt sent after a judge reply that was not a bare digit.
pub const DIGIT_REPROMPT: &str =
    "Your previous reply did not follow the required format. Output only a single digit: 0 or 1. Do not include any other text.";

/// Re-prompt sent after a tool-simulator reply missing the return tags.
pub const FUNC_RETURN_REPROMPT: &str =
    "Your previous reply did not follow the required format. Return only the JSON result enclosed within <func_return> and </func_return> tags.";

/// Re-prompt sent after an assistant reply whose tool-call tags were malformed.
pub const TOOL_CALL_REPROMPT: &str =
    "Your previous reply contained a malformed <tool_call> block. Emit each tool call as one <tool_call>{\"name\": ..., \"arguments\": {...}}</tool_call> block with valid JSON inside.";

pub fn complete_input_messages(function_json: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "Please help me predict the input of the function.\n\n\
         Return only one result in JSON format with two fields: input description and input structure. \
         Input description should describe the content of the input, while input structure should be a list of parameters, \
         each with a name, a description and a type.\n\n\
         The function is: {function_json}"
    ))]
}

pub fn complete_output_messages(function_json: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "Please help me predict the output of this function.\n\n\
         Return only one result in JSON format with two fields: output description and output structure. \
         Output description should describe the content of the output, while output structure should be a list of parameters, \
         each with a name, a description and a type.\n\n\
         The function is: {function_json}"
    ))]
}

pub fn edge_validator_messages(source_json: &str, target_json: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "Please determine whether the following \"source_function\" and \"target_function\" can be highly correlated \
         or the output result of \"source_function\" is suitable as the input parameter of \"target_function\". \
         If the correlation is large or suitable for parameter passing, the specific function is as follows:\n\n\
         ### Source_function:\n\n{source_json}\n\n\
         ### Target_function:\n\n{target_json}\n\n\
         Please evaluate the strength of the association edges and assign a score from 0 to 9 for the following aspects: \
         field transitivity, coherence of potential user intent paths. \
         The output should be a JSON object with exactly two fields: \"Field transitivity\", \
         \"Potential user intent path coherence\". Do not output anything else!!!"
    ))]
}

pub fn intent_messages(tools_json: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "Suppose you have another assistant who has access to the following tools to get information. \
         Please generate one task instruction that mimic real human users and their intentions, \
         such as having different personalities and goals. \
         Note that the intent should be as natural as possible, covering as many tools as possible, \
         but not forcing overwriting if the tools are not closely related. \
         Please ignore image-related tools and do not generate image-related instructions. \
         User intents should be highly consistent, avoiding the awkward patchwork of several unrelated tasks.\n\n\
         ### Tools\n\n{tools_json}\n\n\
         Please output the results strictly in JSON format with two fields: \"Task Instruction\" and \"Tool Usage\" \
         and don't output anything else!!"
    ))]
}

pub fn user_sim_system(intent: &str) -> String {
    format!(
        "You are a human user and must act as a genuine user throughout the conversation, \
         interacting in a manner consistent with normal human behavior. \
         Your primary goal is to achieve the following intent by seeking guidance, advice, or assistance from other participants.\n\n\
         ### Your intent:\n\n{intent}\n\n\
         Please adhere strictly to the following guidelines:\n\n\
         1. Role Consistency and Natural Interaction: Always maintain the role of a user. \
         Do not respond as an assistant, AI, or any authoritative figure. Speak naturally, as a real human would. \
         Avoid repetitive, mechanical, or overly structured responses.\n\n\
         2. Incremental Disclosure: Do not reveal your entire intent at once. \
         Unfold your needs gradually over multiple turns. \
         Use common human conversation strategies, such as showing uncertainty when appropriate.\n\n\
         3. Response to Fulfillment: If the the other participant successfully fulfills your intent, \
         output '{STOP_MARKER}' immediately. Do not output '{STOP_MARKER}' in the first turn, regardless of the conversation!!"
    )
}

pub fn tool_sim_messages(function_info: &str, tool_call_json: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "You are simulating a high-performance computer system with complete computational capabilities. \
         You have access to extensive external knowledge, can execute any arbitrary function, and operate without errors. \
         For a given function, you should simulate the execution of a computer system program as accurately as possible.\n\n\
         ### Function info\n\n{function_info}\n\n\
         ### Function call\n\n{tool_call_json}\n\n\
         Given this function call, you should execute the function and return the results strictly in JSON format.\n\
         Your response should contain only the JSON result, without any additional or irrelevant text.\n\
         The result must be enclosed within <func_return> and </func_return> tags.\n\
         If the function call is invalid (e.g., incorrect function name, missing or malformed arguments), \
         return a JSON error message clearly indicating the cause.\n\n\
         ### Example of function call and function return:\n\n\
         [{{ \"name\": \"get_weather\", \"arguments\": {{\"city\": \"New York\"}} }}]\n\n\
         <func_return> {{ \"temperature\": \"25\u{00b0}C\" }} </func_return>"
    ))]
}

pub fn trajectory_judge_messages(tools_json: &str, messages_text: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "Please strictly evaluate the quality of the following multi-turn dialogue data based on the following criteria: \
         contextual coherence, role consistency, logical soundness, and accuracy of tool usage.\n\
         Your task is to make a binary judgment \u{2014} if the dialogue is of good quality, output 1; otherwise, output 0.\n\n\
         ### Tools\n\n{tools_json}\n\n\
         ### Multi-turn conversations\n\n{messages_text}\n\n\
         Please make a strict and comprehensive assessment of the dialogue's quality, considering whether it maintains \
         contextual coherence, consistent role behavior, logical reasoning, and correct use of tools.\n\
         Finally, output only a single digit: 0 or 1. Do not include any other text or explanation."
    ))]
}

pub fn turn_judge_messages(
    tools_json: &str,
    history_text: &str,
    response_text: &str,
) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "Please strictly evaluate the quality of the last response in the following dialogue data, \
         based on contextual coherence, logical consistency, and accuracy of tool usage.\n\
         Determine whether the response is semantically aligned with the previous dialogue, \
         logically sound without contradictions, and employs the mentioned tools correctly \
         according to their definitions and argument structures.\n\
         If the response is of good quality, output 1; otherwise, output 0.\n\n\
         ### Tools mentioned in the conversation\n\n{tools_json}\n\n\
         ### Conversation history\n\n{history_text}\n\n\
         ### Last response\n\n{response_text}\n\n\
         Please make a strict judgment on whether the last response is of good or poor quality, \
         considering contextual coherence, logical soundness, and correctness of tool usage.\n\
         Finally, output only a single digit: 0 or 1. Do not output any other text or explanation."
    ))]
}

/// System prompt for the assistant agent. The tool list is also passed in
/// the request's native tools field; it is inlined here as text so backends
/// without native tool support see the same information.
pub fn assistant_system(tools_json: &str) -> String {
    format!(
        "You are a helpful assistant with access to the functions listed below. \
         Use them when they help fulfill the user's request; ask for clarification when required arguments are missing.\n\n\
         ### Available functions\n\n{tools_json}\n\n\
         Think through each step inside <think> and </think> tags before answering. \
         To invoke a function, emit one <tool_call>{{\"name\": \"<function name>\", \"arguments\": {{...}}}}</tool_call> block per call, \
         with valid JSON inside. After results arrive, answer the user in plain text."
    )
}

/// Prompt for labeling a user intent with one or more coarse domains.
/// This classification prompt is original to this project.
pub fn domain_messages(intent: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(format!(
        "Classify the following user intent into one or more application domains \
         (for example: data analysis, entertainment, travel, finance, shopping, communication, productivity, health, education, security).\n\n\
         ### Intent\n\n{intent}\n\n\
         Reply strictly with a JSON array of lowercase domain label strings and nothing else."
    ))]
}

/// Stable substrings used to recognize each prompt kind, e.g. by the
/// offline backend when routing a request to its procedural responder.
pub mod markers {
    pub const COMPLETE_INPUT: &str = "predict the input of the function";
    pub const COMPLETE_OUTPUT: &str = "predict the output of this function";
    pub const EDGE_VALIDATOR: &str = "assign a score from 0 to 9";
    pub const INTENT: &str = "generate one task instruction";
    pub const USER_SIM: &str = "must act as a genuine user";
    pub const TOOL_SIM: &str = "simulating a high-performance computer system";
    pub const TRAJECTORY_JUDGE: &str = "quality of the following multi-turn dialogue";
    pub const TURN_JUDGE: &str = "quality of the last response";
    pub const ASSISTANT: &str = "You are a helpful assistant with access to the functions";
    pub const DOMAIN: &str = "Classify the following user intent";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_embed_their_payloads() {
        let msgs = intent_messages("[TOOLS]");
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].content.contains("[TOOLS]"));
        assert!(msgs[0].content.contains("\"Task Instruction\""));

        let sys = user_sim_system("buy a plant");
        assert!(sys.contains("buy a plant"));
        assert!(sys.contains(STOP_MARKER));

        let tool = tool_sim_messages("{info}", "[{call}]");
        assert!(tool[0].content.contains("<func_return>"));

        let judge = turn_judge_messages("[]", "h", "r");
        assert!(judge[0].content.contains("### Last response"));
    }

    #[test]
    fn markers_match_their_templates() {
        assert!(complete_input_messages("f")[0]
            .content
            .contains(markers::COMPLETE_INPUT));
        assert!(complete_output_messages("f")[0]
            .content
            .contains(markers::COMPLETE_OUTPUT));
        assert!(edge_validator_messages("a", "b")[0]
            .content
            .contains(markers::EDGE_VALIDATOR));
        assert!(intent_messages("t")[0].content.contains(markers::INTENT));
        assert!(user_sim_system("i").contains(markers::USER_SIM));
        assert!(tool_sim_messages("f", "c")[0]
            .content
            .contains(markers::TOOL_SIM));
        assert!(trajectory_judge_messages("t", "m")[0]
            .content
            .contains(markers::TRAJECTORY_JUDGE));
        assert!(turn_judge_messages("t", "h", "r")[0]
            .content
            .contains(markers::TURN_JUDGE));
        assert!(assistant_system("t").contains(markers::ASSISTANT));
        assert!(domain_messages("i")[0].content.contains(markers::DOMAIN));
    }
}
