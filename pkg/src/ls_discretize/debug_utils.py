#!/usr/bin/env python3
"""
🛠️ Debugging framework for ls-discretize

Structured errors, fail-fast assertions, timing/memory tracking and the
logger setup shared by every module of the package. Numerical code calls
``debug_assert`` for invariants that must hold exactly (mass bookkeeping,
stopping-time order, nonnegativity) and raises the typed errors below for
anything a caller is expected to handle.
"""

import os
import sys
import time
import json
import logging
import functools
import threading
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import psutil

# ============================================================================
# 🎯 CONFIGURATION MANAGEMENT
# ============================================================================

class ErrorSeverity(Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"

class ErrorCategory(Enum):
    VALIDATION = "VALIDATION"
    NUMERICAL = "NUMERICAL"
    STATISTICAL = "STATISTICAL"
    PRECONDITION = "PRECONDITION"
    CONFIGURATION = "CONFIGURATION"

def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == 'true'

@dataclass
class DebugConfig:
    """Configuration for the debugging framework"""
    enabled: bool = True
    log_level: str = "INFO"
    strict_validation: bool = True
    performance_monitoring: bool = True
    track_memory: bool = True
    log_file_path: Optional[str] = None
    slow_seconds: float = 30.0

    @classmethod
    def from_env(cls) -> 'DebugConfig':
        """Load configuration from environment variables"""
        return cls(
            enabled=_env_flag('LS_DEBUG_ENABLED', 'true'),
            log_level=os.getenv('LS_DEBUG_LEVEL', 'INFO').upper(),
            strict_validation=_env_flag('LS_DEBUG_STRICT', 'true'),
            performance_monitoring=_env_flag('LS_DEBUG_PERF', 'true'),
            track_memory=_env_flag('LS_DEBUG_MEMORY', 'true'),
            log_file_path=os.getenv('LS_DEBUG_LOG_FILE') or None,
            slow_seconds=float(os.getenv('LS_DEBUG_SLOW_SECONDS', '30')),
        )

# Global debug configuration
DEBUG_CONFIG = DebugConfig.from_env()

# ============================================================================
# 🚨 TYPED ERRORS
# ============================================================================

class LSDiscretizeError(Exception):
    """Base error; carries a category and a JSON-able context."""

    category = ErrorCategory.VALIDATION

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}

    def to_debug_error(self, severity: ErrorSeverity = ErrorSeverity.ERROR) -> 'DebugError':
        return DebugError(
            message=self.message,
            category=self.category,
            severity=severity,
            context=self.context,
        )

class UnknownGeneratorError(LSDiscretizeError):
    pass

class StateOutsideWindowError(LSDiscretizeError):
    pass

class MissingValuesError(LSDiscretizeError):
    pass

class IsotropyError(LSDiscretizeError):
    pass

class NotCentralError(LSDiscretizeError):
    pass

class RegionError(LSDiscretizeError):
    pass

class LeakageError(LSDiscretizeError):
    category = ErrorCategory.NUMERICAL

class SingularSystemError(LSDiscretizeError):
    category = ErrorCategory.NUMERICAL

class DominationError(LSDiscretizeError):
    category = ErrorCategory.NUMERICAL

class NoPositivePathError(LSDiscretizeError):
    category = ErrorCategory.NUMERICAL

class NegativeSweepMassError(LSDiscretizeError):
    category = ErrorCategory.NUMERICAL

class DecayContractError(LSDiscretizeError):
    category = ErrorCategory.NUMERICAL

class EmptyBinError(LSDiscretizeError):
    category = ErrorCategory.STATISTICAL

class NonDecayingVisitsError(LSDiscretizeError):
    category = ErrorCategory.STATISTICAL

class PreconditionError(LSDiscretizeError):
    category = ErrorCategory.PRECONDITION

class ConfigError(LSDiscretizeError):
    category = ErrorCategory.CONFIGURATION

# ============================================================================
# 📊 VALIDATION & ASSERTIONS
# ============================================================================

def debug_assert(condition: bool, message: str, context: Optional[Dict[str, Any]] = None):
    """Debug assertion that fails fast in debug mode"""
    if not DEBUG_CONFIG.enabled:
        return

    if not condition:
        error_msg = f"🚨 DEBUG ASSERTION FAILED: {message}"
        if context:
            error_msg += f"\nContext: {json.dumps(context, indent=2, default=str)}"
        raise AssertionError(error_msg)

# ============================================================================
# 🚀 PERFORMANCE MONITORING
# ============================================================================

@dataclass
class PerformanceMetrics:
    """Performance metrics for operations"""
    operation_name: str
    start_time: float
    end_time: float = 0.0
    memory_start: int = 0
    memory_end: int = 0
    context: Dict[str, Any] = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time if self.end_time > 0 else 0.0

    @property
    def memory_delta(self) -> int:
        return self.memory_end - self.memory_start if self.memory_end > 0 else 0

def _rss() -> int:
    return psutil.Process().memory_info().rss if DEBUG_CONFIG.track_memory else 0

class PerformanceTracker:
    """Track performance metrics across the application"""

    def __init__(self):
        self.metrics: List[PerformanceMetrics] = []
        self._lock = threading.Lock()

    def start_operation(self, operation_name: str, context: Optional[Dict[str, Any]] = None) -> PerformanceMetrics:
        """Start tracking an operation"""
        metrics = PerformanceMetrics(
            operation_name=operation_name,
            start_time=time.time(),
            memory_start=_rss(),
            context=context or {}
        )
        with self._lock:
            self.metrics.append(metrics)
        return metrics

    def end_operation(self, metrics: PerformanceMetrics):
        """End tracking an operation"""
        metrics.end_time = time.time()
        metrics.memory_end = _rss()

    def reset(self):
        with self._lock:
            self.metrics.clear()

    def get_performance_report(self) -> Dict[str, Any]:
        """Generate performance report"""
        with self._lock:
            completed_metrics = [m for m in self.metrics if m.end_time > 0]

        if not completed_metrics:
            return {"message": "No completed operations"}

        by_name: Dict[str, List[float]] = {}
        for m in completed_metrics:
            by_name.setdefault(m.operation_name, []).append(m.duration)

        return {
            "total_operations": len(completed_metrics),
            "total_duration": sum(m.duration for m in completed_metrics),
            "max_duration": max(m.duration for m in completed_metrics),
            "by_operation": {
                name: {"count": len(d), "total": sum(d), "max": max(d)}
                for name, d in sorted(by_name.items())
            },
            "peak_memory_delta": max(m.memory_delta for m in completed_metrics),
        }

# Global performance tracker
performance_tracker = PerformanceTracker()

def debug_timer(func: Callable) -> Callable:
    """Decorator to time function execution with performance tracking"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        if not DEBUG_CONFIG.enabled or not DEBUG_CONFIG.performance_monitoring:
            return func(*args, **kwargs)

        metrics = performance_tracker.start_operation(func.__qualname__)
        try:
            return func(*args, **kwargs)
        finally:
            performance_tracker.end_operation(metrics)
            if metrics.duration > DEBUG_CONFIG.slow_seconds:
                get_logger(func.__module__).warning(
                    f"🐌 Slow operation detected: {func.__qualname__} took {metrics.duration:.2f} seconds"
                )

    return wrapper

# ============================================================================
# 📝 DEBUG CONTEXT MANAGER
# ============================================================================

@contextmanager
def DebugContext(operation_name: str, **context):
    """Context manager for debug operations"""
    if not DEBUG_CONFIG.enabled:
        yield
        return

    log = get_logger('ls_discretize.debug')
    start_time = time.time()
    log.debug(f"🔄 Starting: {operation_name} {context if context else ''}")

    try:
        yield
        log.debug(f"✅ Completed: {operation_name}")

    except Exception as e:
        duration = time.time() - start_time
        log.error(f"❌ Failed: {operation_name} after {duration:.2f} seconds - {str(e)}")
        raise

    finally:
        duration = time.time() - start_time
        if duration > DEBUG_CONFIG.slow_seconds:
            log.warning(f"⏱️  Long-running operation: {operation_name} took {duration:.2f} seconds")

# ============================================================================
# 📋 ERROR HANDLING & LOGGING
# ============================================================================

@dataclass
class DebugError:
    """Structured error with full context"""
    message: str
    category: ErrorCategory
    severity: ErrorSeverity
    context: Dict[str, Any] = field(default_factory=dict)
    stack_trace: str = ""
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        if not self.stack_trace:
            trace = traceback.format_exc()
            self.stack_trace = "" if trace.startswith("NoneType: None") else trace

    def to_dict(self) -> Dict[str, Any]:
        return {
            "message": self.message,
            "category": self.category.value,
            "severity": self.severity.value,
            "context": self.context,
            "stack_trace": self.stack_trace,
            "timestamp": self.timestamp
        }

class DebugLogger:
    """Enhanced logging with structured error tracking"""

    ROOT_NAME = 'ls_discretize'

    def __init__(self):
        self.errors: List[DebugError] = []
        self._configured = False
        self._lock = threading.Lock()
        self.logger = logging.getLogger(self.ROOT_NAME)

    def setup_logging(self, force: bool = False):
        """Setup logging configuration (idempotent unless forced)"""
        with self._lock:
            if self._configured and not force:
                return

            self.logger.setLevel(getattr(logging, DEBUG_CONFIG.log_level, logging.INFO))
            self.logger.propagate = False

            for handler in self.logger.handlers[:]:
                self.logger.removeHandler(handler)

            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setFormatter(logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            ))
            self.logger.addHandler(console_handler)

            if DEBUG_CONFIG.log_file_path:
                file_handler = logging.FileHandler(DEBUG_CONFIG.log_file_path)
                file_handler.setFormatter(logging.Formatter(
                    '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
                ))
                self.logger.addHandler(file_handler)

            self._configured = True

    def log_error(self, error: DebugError):
        """Log structured error"""
        self.setup_logging()
        with self._lock:
            self.errors.append(error)

        log_message = f"[{error.category.value}] {error.message}"
        if error.context:
            log_message += f" | Context: {json.dumps(error.context, default=str)}"

        if error.severity == ErrorSeverity.CRITICAL:
            self.logger.critical(log_message)
        elif error.severity == ErrorSeverity.ERROR:
            self.logger.error(log_message)
        elif error.severity == ErrorSeverity.WARNING:
            self.logger.warning(log_message)
        else:
            self.logger.info(log_message)

    def get_error_summary(self) -> Dict[str, Any]:
        """Get error summary statistics"""
        with self._lock:
            errors = list(self.errors)

        if not errors:
            return {"message": "No errors recorded"}

        errors_by_category: Dict[str, int] = {}
        errors_by_severity: Dict[str, int] = {}
        for error in errors:
            errors_by_category[error.category.value] = errors_by_category.get(error.category.value, 0) + 1
            errors_by_severity[error.severity.value] = errors_by_severity.get(error.severity.value, 0) + 1

        return {
            "total_errors": len(errors),
            "errors_by_category": errors_by_category,
            "errors_by_severity": errors_by_severity,
            "recent_errors": [e.to_dict() for e in errors[-5:]]
        }

# Global debug logger
debug_logger = DebugLogger()

def get_logger(name: str) -> logging.Logger:
    """Child logger under the package root; configures handlers on first use."""
    debug_logger.setup_logging()
    if name.startswith(DebugLogger.ROOT_NAME):
        return logging.getLogger(name)
    return logging.getLogger(f"{DebugLogger.ROOT_NAME}.{name}")
