"""Synthetic dialogues whose true responses are predictable by construction.

Every topic has a primary keyword, used in original profiles and in responses, and
a secondary keyword used only by revised profiles. Each utterance ends with a cue
question about an off-persona topic. Depending on ``signal`` the true response names
a keyword of a persona profile, the cue of the previous utterance, or both.
Negatives only mention topics outside both personas, the true response and the cue.
Under the ``none`` signal every candidate is drawn from one distribution, so nothing
separates the true response from the negatives.
"""

import logging

import numpy as np

from persona_fusion.models import DialogueRecord, Signal, Speaker, SyntheticSpec, Turn
from persona_fusion.seeding import substream

logger = logging.getLogger(__name__)

TOPICS: tuple[tuple[str, str], ...] = (
    ("hiking", "trails"),
    ("cooking", "recipes"),
    ("guitar", "chords"),
    ("soccer", "goals"),
    ("painting", "canvas"),
    ("dogs", "puppies"),
    ("cats", "kittens"),
    ("swimming", "pools"),
    ("chess", "checkmate"),
    ("gardening", "tomatoes"),
    ("coffee", "espresso"),
    ("baking", "pastries"),
    ("skiing", "slopes"),
    ("fishing", "lakes"),
    ("reading", "novels"),
    ("photography", "cameras"),
    ("yoga", "meditation"),
    ("jazz", "saxophone"),
    ("cycling", "bicycles"),
    ("surfing", "waves"),
    ("camping", "tents"),
    ("astronomy", "telescopes"),
    ("knitting", "yarn"),
    ("running", "marathons"),
    ("dancing", "salsa"),
    ("movies", "cinema"),
    ("volunteering", "charity"),
    ("poetry", "verses"),
    ("pottery", "clay"),
    ("horses", "stables"),
    ("tennis", "rackets"),
    ("basketball", "hoops"),
    ("travel", "passports"),
    ("wine", "vineyards"),
    ("gaming", "consoles"),
    ("birds", "feathers"),
    ("sushi", "wasabi"),
    ("theater", "musicals"),
    ("sailing", "boats"),
    ("history", "museums"),
)

PROFILE_TEMPLATES = ("i love {}.", "my favorite hobby is {}.", "i spend most weekends on {}.", "i am really into {}.")
REVISED_TEMPLATES = (
    "i am fond of {}.",
    "{} make me happy.",
    "nothing beats a day of {}.",
    "i could talk about {} forever.",
)
RESPONSE_TEMPLATES = ("i have been into {} lately.", "honestly {} is my favorite thing.", "well, i really enjoy {}.")
BOTH_TEMPLATES = ("i have been into {} and {} lately.", "honestly {} and {} are my favorite things.")
CUE = " what do you think about {}?"
OPENERS = ("hi there!", "hello, how are you?", "hey, nice to meet you.")


def _pick(rng: np.random.Generator, pool: list[int], count: int = 1) -> list[int]:
    return [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]


def _profiles(
    rng: np.random.Generator, topics: list[int], keywords: list[str], templates: tuple[str, ...]
) -> list[str]:
    return [templates[int(rng.integers(len(templates)))].format(keywords[t]) for t in topics]


def _any_response(rng: np.random.Generator, keywords: list[str]) -> str:
    topic, follow_up = (keywords[int(i)] for i in rng.integers(len(keywords), size=2))
    return RESPONSE_TEMPLATES[int(rng.integers(len(RESPONSE_TEMPLATES)))].format(topic) + CUE.format(follow_up)


def generate_synthetic(spec: SyntheticSpec) -> list[DialogueRecord]:
    """Generate ``spec.num_dialogues`` seed-deterministic dialogues.

    Args:
        spec: Corpus size, topic count, predictive signal, partner rate and seed

    Returns:
        Dialogue records; every turn after the opener carries ``spec.num_candidates`` candidates
    """
    if spec.topics > len(TOPICS):
        raise ValueError(f"at most {len(TOPICS)} topics are available, got {spec.topics}")
    primary = [p for p, _ in TOPICS[: spec.topics]]
    secondary = [s for _, s in TOPICS[: spec.topics]]
    rng = substream(spec.seed, "synthetic")
    records: list[DialogueRecord] = []

    for _ in range(spec.num_dialogues):
        everything = list(range(spec.topics))
        topics_a = _pick(rng, everything, int(rng.integers(3, 6)))
        remaining = [t for t in everything if t not in topics_a]
        topics_b = _pick(rng, remaining, int(rng.integers(3, 6)))
        persona_topics = {Speaker.A: topics_a, Speaker.B: topics_b}
        off_persona = [t for t in remaining if t not in topics_b]

        cue = _pick(rng, off_persona)[0]
        turns = [Turn(speaker=Speaker.A, text=OPENERS[int(rng.integers(len(OPENERS)))] + CUE.format(primary[cue]))]
        candidates: list[list[str] | None] = [None]
        answers: list[int | None] = [None]

        for t in range(1, spec.turns_per_dialogue):
            speaker = Speaker.A if t % 2 == 0 else Speaker.B
            partner = Speaker.B if speaker == Speaker.A else Speaker.A
            owner = partner if rng.random() < spec.partner_rate else speaker
            persona_topic = _pick(rng, persona_topics[owner])[0]
            previous_cue = cue
            cue = _pick(rng, [x for x in off_persona if x != previous_cue])[0]

            if spec.signal == Signal.PERSONA:
                true_topics = [persona_topic]
            elif spec.signal == Signal.CONTEXT:
                true_topics = [previous_cue]
            else:
                true_topics = [persona_topic, previous_cue]
            if len(true_topics) == 1:
                template = RESPONSE_TEMPLATES[int(rng.integers(len(RESPONSE_TEMPLATES)))]
            else:
                template = BOTH_TEMPLATES[int(rng.integers(len(BOTH_TEMPLATES)))]
            true_text = template.format(*(primary[x] for x in true_topics)) + CUE.format(primary[cue])

            negative_pool = [x for x in off_persona if x not in (previous_cue, cue)]
            negatives = []
            for _ in range(spec.num_candidates - 1):
                topic, follow_up = (negative_pool[int(i)] for i in rng.integers(len(negative_pool), size=2))
                template = RESPONSE_TEMPLATES[int(rng.integers(len(RESPONSE_TEMPLATES)))]
                negatives.append(template.format(primary[topic]) + CUE.format(primary[follow_up]))

            answer = int(rng.integers(spec.num_candidates))
            slot = negatives[:answer] + [true_text] + negatives[answer:]
            if spec.signal == Signal.NONE:
                slot = [_any_response(rng, primary) for _ in range(spec.num_candidates)]
                true_text = slot[answer]
            turns.append(Turn(speaker=speaker, text=true_text))
            candidates.append(slot)
            answers.append(answer)

        records.append(
            DialogueRecord(
                persona_a=_profiles(rng, topics_a, primary, PROFILE_TEMPLATES),
                persona_b=_profiles(rng, topics_b, primary, PROFILE_TEMPLATES),
                persona_a_revised=_profiles(rng, topics_a, secondary, REVISED_TEMPLATES),
                persona_b_revised=_profiles(rng, topics_b, secondary, REVISED_TEMPLATES),
                turns=turns,
                candidates=candidates,
                answer_index=answers,
            )
        )
    logger.info(
        f"Generated {len(records)} synthetic dialogues (signal={spec.signal.value}, seed={spec.seed}, "
        f"partner_rate={spec.partner_rate})"
    )
    return records


def topic_keywords(spec: SyntheticSpec) -> set[str]:
    """Primary keywords of the topics a corpus generated from ``spec`` can use."""
    return {p for p, _ in TOPICS[: spec.topics]}
