"""
Trình Tải Cấu Hình
Tải config.json đè lên giá trị mặc định, áp dụng preset và biến môi trường.
Xác thực kết quả.
"""

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional
import logging

from utils.error_handler import ConfigError
from utils.file_utils import hash_json

logger = logging.getLogger(__name__)


class ConfigLoader:
    """Tải và xác thực cấu hình thí nghiệm"""

    DEFAULT_CONFIG = {
        "PATHS": {
            "OUTPUT_DIR": "runs/default"
        },
        "SYSTEM": {
            "MAX_WORKERS": 4,
            "LOG_EVERY": 50
        },
        # Mỗi giai đoạn một seed; mọi ngẫu nhiên của giai đoạn đều bắt nguồn từ seed đó
        "SEEDS": {
            "CORPUS": 13,
            "SPLITS": 29,
            "INIT": 7,
            "TRAIN_BASE": 101,
            "TRAIN_CBR": 202,
            "RETRIEVER": 303,
            "CONCAT": 404,
            "VALUES": 505,
            "FINETUNE": 606
        },
        "CORPUS": {
            "TRAIN_SCHEMAS": 12,
            "HELDOUT_SCHEMAS": 3,
            "TRAIN_EXAMPLES_PER_SCHEMA": 60,
            "HELDOUT_EXAMPLES_PER_SCHEMA": 90,
            "PARENT_ROWS": 6,
            "CHILD_ROWS": 16,
            "LEXICON_SHIFT": [0.5, 0.7, 0.9],
            "TRAIN_SYNONYM_RATE": 0.0,
            "DEV_FRACTION": 0.1
        },
        "SPLITS": {
            "CASES_PER_SCHEMA": 30,
            "NUM_SPLITS": 3
        },
        "MODEL": {
            "HIDDEN_SIZE": 64,
            "ATTENTION_HEADS": 4,
            "FEEDFORWARD_DIM": 256,
            "ENCODER_BLOCKS": 2,
            "TREE_BLOCKS": 1,
            "MAX_TOKENS": 256,
            "VALUE_SAMPLE_PER_COLUMN": 1
        },
        "DECODER": {
            "BEAM_SIZE": 8,
            "MAX_HEIGHT": 6,
            "FINAL_QUERY_ONLY": True,
            "TRACE": False
        },
        "TRAINING": {
            "STEPS": 800,
            "BATCH_SIZE": 16,
            "LEARNING_RATE": 1e-3,
            "GRAD_CLIP": 5.0
        },
        "CBR": {
            "BLOCKS": 2,
            "CASES_PER_GROUP": 8,
            "BATCH_SIZE": 16,
            "STEPS": 300,
            "LEARNING_RATE": 1e-3,
            "SHARE_OP_EMBEDDING": True,
            "BOOST_LEAVES": True
        },
        "GTM": {
            "K": 8,
            "TAU": 1.0,
            "LAMBDA": 0.3
        },
        "RETRIEVER": {
            "HIDDEN_SIZE": 64,
            "PARTNERS": 15,
            "TOP_R": 5,
            "STEPS": 300,
            "BATCH_SIZE": 16,
            "LEARNING_RATE": 1e-2
        },
        "CONCAT": {
            "STEPS": 400,
            "BATCH_SIZE": 16,
            "LEARNING_RATE": 5e-4
        },
        "FINETUNE": {
            "EPOCHS": [1, 2, 5, 10, 20],
            "BATCH_SIZE": 8,
            "LEARNING_RATE": 1e-3
        },
        "ABLATION": {
            "PRUNE_FACTOR": 5
        },
        "SWEEP": {
            "CASE_COUNTS": [10, 20, 30],
            "METHODS": ["structcbr", "gtm"]
        },
        "PRESETS": {
            "large": {
                "MODEL": {"HIDDEN_SIZE": 256, "ATTENTION_HEADS": 8, "FEEDFORWARD_DIM": 1024},
                "DECODER": {"BEAM_SIZE": 30},
                "TRAINING": {"LEARNING_RATE": 1.86e-4, "BATCH_SIZE": 80},
                "CBR": {"CASES_PER_GROUP": 32, "BATCH_SIZE": 64, "LEARNING_RATE": 1.86e-4},
                "CONCAT": {"LEARNING_RATE": 5e-5},
                "FINETUNE": {"EPOCHS": [1, 2, 5, 10, 20, 100]}
            }
        },
        "PRESET": None
    }

    def __init__(self, config_path: str = "config.json", preset: Optional[str] = None):
        self.config_path = Path(config_path)
        self.config: Dict[str, Any] = {}
        self._load_config()
        self._apply_preset(preset or self.config.get("PRESET"))
        self._apply_env_overrides()
        self._validate_config()

    def _load_config(self) -> None:
        """Tải cấu hình từ tệp JSON"""
        if not self.config_path.exists():
            logger.warning(f"Config file not found at {self.config_path}, using defaults")
            self.config = self._deep_copy_dict(self.DEFAULT_CONFIG)
            return

        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                file_config = json.load(f)
            self.config = self._deep_merge(self.DEFAULT_CONFIG, file_config)
            logger.info(f"Loaded config from {self.config_path}")
        except Exception as e:
            raise ConfigError(f"Cannot load config: {e}", original_error=e)

    def _apply_preset(self, name: Optional[str]) -> None:
        if not name:
            return
        preset = self.config.get("PRESETS", {}).get(name)
        if preset is None:
            raise ConfigError(f"Unknown preset {name!r}")
        self.config = self._deep_merge(self.config, preset)
        self.config["PRESET"] = name
        logger.info(f"Applied preset {name}")

    def _apply_env_overrides(self) -> None:
        """Áp dụng ghi đè từ biến môi trường"""
        if os.getenv('STRUCTCBR_OUT'):
            self.config['PATHS']['OUTPUT_DIR'] = os.getenv('STRUCTCBR_OUT')

    def _validate_config(self) -> None:
        """Xác thực các cài đặt bắt buộc"""
        hidden = self.get('MODEL.HIDDEN_SIZE')
        heads = self.get('MODEL.ATTENTION_HEADS')
        if not heads or hidden % heads != 0:
            raise ConfigError(f"MODEL.HIDDEN_SIZE {hidden} is not divisible by ATTENTION_HEADS {heads}")
        if self.get('RETRIEVER.HIDDEN_SIZE', 1) < 1:
            raise ConfigError("RETRIEVER.HIDDEN_SIZE must be positive")

        if self.get('DECODER.BEAM_SIZE', 0) < 1:
            raise ConfigError("DECODER.BEAM_SIZE must be at least 1")
        if self.get('DECODER.MAX_HEIGHT', 0) < 1:
            raise ConfigError("DECODER.MAX_HEIGHT must be at least 1")

        group = self.get('CBR.CASES_PER_GROUP', 0)
        batch = self.get('CBR.BATCH_SIZE', 0)
        if group < 2 or batch % group != 0:
            raise ConfigError(f"CBR.BATCH_SIZE {batch} must be a multiple of CBR.CASES_PER_GROUP {group} (>= 2)")

        lam = self.get('GTM.LAMBDA')
        if lam is None or not 0.0 <= lam <= 1.0:
            raise ConfigError(f"GTM.LAMBDA must lie in [0, 1], got {lam}")
        if self.get('GTM.TAU', 0) <= 0:
            raise ConfigError("GTM.TAU must be positive")
        if self.get('GTM.K', 0) < 1:
            raise ConfigError("GTM.K must be at least 1")

        if self.get('SPLITS.CASES_PER_SCHEMA', -1) < 0:
            raise ConfigError("SPLITS.CASES_PER_SCHEMA must be non-negative")
        if self.get('SPLITS.NUM_SPLITS', 0) < 1:
            raise ConfigError("SPLITS.NUM_SPLITS must be at least 1")
        if self.get('CORPUS.TRAIN_SCHEMAS', 0) < 1 or self.get('CORPUS.HELDOUT_SCHEMAS', 0) < 1:
            raise ConfigError("CORPUS needs positive train and held-out schema counts")

        for key, value in self.get('SEEDS', {}).items():
            if not isinstance(value, int):
                raise ConfigError(f"SEEDS.{key} must be an integer, got {value!r}")

    def _deep_copy_dict(self, d: Dict) -> Dict:
        return copy.deepcopy(d)

    def _deep_merge(self, base: Dict, override: Dict) -> Dict:
        """Gộp sâu hai từ điển; override được ưu tiên"""
        result = self._deep_copy_dict(base)

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = value

        return result

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        Lấy giá trị theo đường dẫn phân tách bằng dấu chấm.

        Ví dụ: get('MODEL.HIDDEN_SIZE')
        """
        keys = key_path.split('.')
        value = self.config

        for key in keys:
            if isinstance(value, dict):
                value = value.get(key)
                if value is None:
                    return default
            else:
                return default

        return value

    def set(self, key_path: str, value: Any) -> None:
        """Ghi đè một giá trị (cờ CLI); xác thực lại"""
        keys = key_path.split('.')
        target = self.config
        for key in keys[:-1]:
            target = target.setdefault(key, {})
        target[keys[-1]] = value
        self._validate_config()

    def seed(self, phase: str) -> int:
        value = self.get(f'SEEDS.{phase}')
        if value is None:
            raise ConfigError(f"No seed configured for phase {phase}")
        return int(value)

    def config_hash(self) -> str:
        return hash_json(self.config)

    @property
    def output_dir(self) -> Path:
        return Path(self.get('PATHS.OUTPUT_DIR', 'runs/default'))


@dataclass(frozen=True)
class ModelConfig:
    """Kích thước và giới hạn giải mã cần để dựng parser"""
    hidden_size: int = 64
    attention_heads: int = 4
    feedforward_dim: int = 256
    encoder_blocks: int = 2
    tree_blocks: int = 1
    max_tokens: int = 256
    value_sample_per_column: int = 1
    beam_size: int = 8
    max_height: int = 6
    final_query_only: bool = True
    cbr_blocks: int = 2
    share_op_embedding: bool = True
    boost_leaves: bool = True

    @classmethod
    def from_loader(cls, config: ConfigLoader) -> "ModelConfig":
        return cls(
            hidden_size=config.get('MODEL.HIDDEN_SIZE', 64),
            attention_heads=config.get('MODEL.ATTENTION_HEADS', 4),
            feedforward_dim=config.get('MODEL.FEEDFORWARD_DIM', 256),
            encoder_blocks=config.get('MODEL.ENCODER_BLOCKS', 2),
            tree_blocks=config.get('MODEL.TREE_BLOCKS', 1),
            max_tokens=config.get('MODEL.MAX_TOKENS', 256),
            value_sample_per_column=config.get('MODEL.VALUE_SAMPLE_PER_COLUMN', 1),
            beam_size=config.get('DECODER.BEAM_SIZE', 8),
            max_height=config.get('DECODER.MAX_HEIGHT', 6),
            final_query_only=bool(config.get('DECODER.FINAL_QUERY_ONLY', True)),
            cbr_blocks=config.get('CBR.BLOCKS', 2),
            share_op_embedding=bool(config.get('CBR.SHARE_OP_EMBEDDING', True)),
            boost_leaves=bool(config.get('CBR.BOOST_LEAVES', True)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)
