nudge_payload_schema = {
    "type" : "object",
    "properties" : {
        "decision" : {
            "type" : "string",
            "minLength" : 1,
            "description" : "The id of the decision that produced the message"
        },
        "anchor" : {
            "type" : "string",
            "minLength" : 1,
            "description" : "The sku the user buys frequently (item A of the message)"
        },
        "target" : {
            "type" : "string",
            "minLength" : 1,
            "description" : "The sku the user rarely or never buys (item B of the message)"
        }
    },
    "required" : ["decision", "anchor", "target"],
    "additionalProperties" : False
}

order_payload_schema = {
    "type" : "object",
    "properties" : {
        "lines" : {
            "type" : "array",
            "minItems" : 1,
            "items" : {
                "type" : "object",
                "properties" : {
                    "sku" : {"type" : "string", "minLength" : 1},
                    "qty" : {"type" : "integer", "minimum" : 1},
                    "price" : {"type" : "number", "minimum" : 0}
                },
                "required" : ["sku", "qty", "price"],
                "additionalProperties" : False
            }
        }
    },
    "required" : ["lines"],
    "additionalProperties" : False
}

login_payload_schema = {
    "type" : "object",
    "properties" : {
        "lang" : {
            "type" : "string",
            "description" : "App language tag at login, ex. id, en"
        },
        "region" : {
            "type" : "string",
            "description" : "Region of the pharmacy, ex. Jakarta"
        },
        "session_seconds" : {
            "type" : "number",
            "minimum" : 0,
            "description" : "Time spent in the app during the session"
        }
    },
    "additionalProperties" : False
}

NUDGE_KINDS = ["nudge_sent", "nudge_opened", "nudge_closed", "nudge_expired"]

event_schema = {
    "type" : "object",
    "properties" : {
        "ts" : {"type" : "string", "minLength" : 1},
        "user" : {"type" : "string", "minLength" : 1},
        "pharmacy" : {"type" : "string", "minLength" : 1},
        "kind" : {
            "type" : "string",
            "enum" : ["login", "order"] + NUDGE_KINDS
        },
        "payload" : {"type" : "object"}
    },
    "required" : ["ts", "user", "pharmacy", "kind", "payload"],
    "additionalProperties" : False,
    "allOf" : [
        {
            "if" : {"properties" : {"kind" : {"const" : "login"}}},
            "then" : {"properties" : {"payload" : login_payload_schema}}
        },
        {
            "if" : {"properties" : {"kind" : {"const" : "order"}}},
            "then" : {"properties" : {"payload" : order_payload_schema}}
        },
        {
            "if" : {"properties" : {"kind" : {"enum" : NUDGE_KINDS}}},
            "then" : {"properties" : {"payload" : nudge_payload_schema}}
        }
    ]
}

test_result_schema = {
    "type" : "object",
    "properties" : {
        "day" : {"type" : "integer", "minimum" : 0},
        "t_statistic" : {"type" : "number"},
        "df" : {"type" : "number", "exclusiveMinimum" : 0},
        "p_value" : {"type" : "number", "minimum" : 0, "maximum" : 1},
        "cohen_d" : {"type" : "number"},
        "power" : {"type" : "number", "minimum" : 0, "maximum" : 1},
        "mean_difference" : {"type" : "number"},
        "ci_low" : {"type" : "number"},
        "ci_high" : {"type" : "number"},
        "alpha" : {"type" : "number", "exclusiveMinimum" : 0, "exclusiveMaximum" : 1},
        "significant" : {"type" : "boolean"}
    },
    "required" : ["day", "t_statistic", "df", "p_value", "cohen_d", "power", "mean_difference", "ci_low", "ci_high", "alpha", "significant"]
}

evolution_schema = {
    "type" : "object",
    "properties" : {
        "mode" : {"type" : "string", "enum" : ["daily", "accumulated"]},
        "results" : {"type" : "array", "items" : test_result_schema},
        "skipped_days" : {"type" : "array", "items" : {"type" : "integer"}},
        "significant_fraction" : {"type" : "number", "minimum" : 0, "maximum" : 1}
    },
    "required" : ["mode", "results", "skipped_days", "significant_fraction"]
}

fraction = {"type" : "number", "minimum" : 0, "maximum" : 1}

report_schema = {
    "type" : "object",
    "properties" : {
        "alpha" : {"type" : "number", "exclusiveMinimum" : 0, "exclusiveMaximum" : 1},
        "n_days" : {"type" : "integer", "minimum" : 1},
        "n_weeks" : {"type" : "integer", "minimum" : 1},
        "group_sizes" : {
            "type" : "object",
            "properties" : {
                "adaptive" : {"type" : "integer", "minimum" : 0},
                "pure_control" : {"type" : "integer", "minimum" : 0}
            },
            "required" : ["adaptive", "pure_control"]
        },
        "daily" : evolution_schema,
        "accumulated" : evolution_schema,
        "login_daily" : evolution_schema,
        "login_accumulated" : evolution_schema,
        "ttest_summary" : {"type" : "object"},
        "stratified" : {
            "type" : "object",
            "additionalProperties" : evolution_schema
        },
        "logit" : {"type" : ["object", "null"]},
        "lmm" : {"type" : ["object", "null"]},
        "allocation" : {
            "type" : "object",
            "properties" : {
                "weekly_treat_fraction" : {"type" : "array", "items" : fraction},
                "mean_treat_fraction" : fraction,
                "majority_nudged_weeks" : {"type" : "integer", "minimum" : 0}
            },
            "required" : ["weekly_treat_fraction", "mean_treat_fraction", "majority_nudged_weeks"]
        },
        "sensitivity" : {"type" : ["object", "null"]},
        "embedding" : {"type" : ["object", "null"]},
        "reactions" : {
            "type" : "object",
            "properties" : {
                "opened" : fraction,
                "closed" : fraction,
                "ignored" : fraction,
                "sent" : {"type" : "integer", "minimum" : 0}
            },
            "required" : ["opened", "closed", "ignored", "sent"]
        },
        "weekly_reactions" : {"type" : "array"},
        "success_fraction" : fraction,
        "notes" : {"type" : "array", "items" : {"type" : "string"}}
    },
    "required" : ["alpha", "n_days", "n_weeks", "group_sizes", "daily", "accumulated", "allocation", "reactions", "success_fraction"]
}
