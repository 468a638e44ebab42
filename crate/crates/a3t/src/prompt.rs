//! Low-level prompt-format conventions shared by the agents and the toy
//! backend's prompt parser.

/// Cue that asks the reason-then-act agent for its next (reason, action).
pub const REACT_CUE: &str = "Reason:";
/// Cue that asks the act-then-reason annotator for a posterior rationale.
pub const ACTRE_CUE: &str = "Reason for the action:";

/// Render an action for an `Action:` line: think forms pass through, anything
/// else is wrapped as `act[...]`.
pub fn wrap_action(action: &str) -> String {
    if action.starts_with("think[") {
        action.to_string()
    } else {
        format!("act[{action}]")
    }
}

/// Inverse of [`wrap_action`]; unwrapped text passes through trimmed.
pub fn unwrap_action(rendered: &str) -> String {
    let t = rendered.trim();
    if t.starts_with("think[") {
        return t.to_string();
    }
    if let Some(inner) = t.strip_prefix("act[").and_then(|r| r.strip_suffix(']')) {
        return inner.to_string();
    }
    t.to_string()
}

/// Pull the goal phrase out of an episode's first observation.
pub fn goal_phrase(first_observation: &str) -> String {
    if let Some(pos) = first_observation.find("Your task is to: ") {
        let rest = &first_observation[pos + "Your task is to: ".len()..];
        if let Some(dot) = rest.find('.') {
            return rest[..dot].to_string();
        }
        return rest.to_string();
    }
    if let Some(pos) = first_observation.find("Instruction: ") {
        let rest = &first_observation[pos + "Instruction: ".len()..];
        return rest.lines().next().unwrap_or(rest).to_string();
    }
    first_observation
        .lines()
        .next()
        .unwrap_or(first_observation)
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_unwrap_roundtrip() {
        assert_eq!(wrap_action("go to shelf 1"), "act[go to shelf 1]");
        assert_eq!(wrap_action("think[hm]"), "think[hm]");
        assert_eq!(unwrap_action("act[go to shelf 1]"), "go to shelf 1");
        assert_eq!(unwrap_action("think[hm]"), "think[hm]");
        assert_eq!(unwrap_action("  bare text "), "bare text");
    }

    #[test]
    fn goal_extraction_handles_both_envs() {
        assert_eq!(
            goal_phrase("Your task is to: put some key in/on table 1. You are in a room."),
            "put some key in/on table 1"
        );
        assert_eq!(
            goal_phrase("MiniShop\nInstruction: i need a modern lamp\n[Search]"),
            "i need a modern lamp"
        );
    }
}
