# Copyright 2026 The ICGE-Align Authors.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
Package overview
================
"""
from .iccot import ReasoningTrace, ValidationReport, parse_trace, render_trace, trace_from_json, trace_to_json
from .world import (
    EntityInstance,
    SceneSpec,
    TaskInstance,
    TaskKind,
    WorldConfig,
    caption_of,
    decode_scene,
    interpret_instruction,
    oracle_trace,
    render_scene,
    sample_task,
)
from .embed import embed_image, embed_text, quality_score, surrogate_reward
from .model import (
    ModelConfig,
    Parameters,
    Prompt,
    cot_loss,
    encode_context,
    flow_loss,
    generate,
    init_params,
    load_checkpoint,
    sample_trace,
    save_checkpoint,
)
from .sft import SftConfig, train_sft
from .align import AlignConfig, RolloutGroup, compute_advantages, grpo_update, rollout_group, train_align
from .datafactory import DatasetRecord, FilterThresholds, build_records, filter_dataset, read_jsonl, write_jsonl
from .evaluation import EvalReport, SampleScore, judge_sample, run_benchmark
from .config import Config, dump_config, load_config
from .harness import dispatch
from .exceptions import IcgeError
from ._version import __version__
