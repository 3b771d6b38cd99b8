import logging
from logging.handlers import RotatingFileHandler
import os

LOGGER_NAME = "peepll"

# Los módulos planos registran con su __name__, fuera de la jerarquía "peepll"
MODULE_LOGGERS = ("crypto", "secure_index", "ot", "protocol", "pvault", "depositor",
                  "harness", "config", "visualization", "commands")


def setup_logging(log_dir: str = "Data/Logs", level: int = logging.INFO, console: bool = True):
    # Crear directorio de logs si no existe
    os.makedirs(log_dir, exist_ok=True)

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)
    # setup_logging puede llamarse varias veces (tests, subcomandos)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    # Handler para errores críticos
    error_handler = RotatingFileHandler(
        f"{log_dir}/errors.log",
        maxBytes=1024*1024,  # 1MB
        backupCount=5
    )
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(logging.Formatter(
        '%(asctime)s [%(levelname)s] %(module)s:%(lineno)d - %(message)s'
    ))

    # Handler para eventos del sistema
    system_handler = RotatingFileHandler(
        f"{log_dir}/system.log",
        maxBytes=1024*1024,
        backupCount=5
    )
    system_handler.setLevel(level)
    system_handler.setFormatter(logging.Formatter(
        '%(asctime)s [%(levelname)s] %(module)s - %(message)s'
    ))

    # Handler para eventos del mapping (creación, expulsión, epochs)
    vault_handler = RotatingFileHandler(
        f"{log_dir}/vault.log",
        maxBytes=1024*1024,
        backupCount=5
    )
    vault_handler.setLevel(logging.INFO)
    vault_handler.addFilter(logging.Filter(f"{LOGGER_NAME}.vault"))
    vault_handler.setFormatter(logging.Formatter(
        '%(asctime)s [VAULT] %(message)s'
    ))

    logger.addHandler(error_handler)
    logger.addHandler(system_handler)
    logger.addHandler(vault_handler)

    if console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.WARNING)
        console_handler.setFormatter(logging.Formatter('[%(levelname)s] %(message)s'))
        logger.addHandler(console_handler)

    for name in MODULE_LOGGERS:
        module_logger = logging.getLogger(name)
        module_logger.setLevel(level)
        module_logger.propagate = False
        module_logger.handlers = [h for h in logger.handlers if h is not vault_handler]

    return logger


# Loggers específicos
error_logger = logging.getLogger(f'{LOGGER_NAME}.errors')
system_logger = logging.getLogger(f'{LOGGER_NAME}.system')
vault_logger = logging.getLogger(f'{LOGGER_NAME}.vault')

# Nunca se registran QIDs, tokens, pseudónimos ni claves: solo contadores,
# modos, epochs y códigos de error.


def log_error(error: Exception, context: str = None):
    """Log errores con contexto"""
    error_logger.error(
        f"Error: {str(error)} | "
        f"Context: {context} | "
        f"Type: {type(error).__name__}"
    )


def log_vault_event(action: str, mode: str, details: dict = None):
    """Log eventos del mapping de pseudónimos"""
    vault_logger.info(
        f"Action: {action} | "
        f"Mode: {mode} | "
        f"Details: {details if details else {}}"
    )


def log_system_event(event: str, details: dict = None):
    """Log eventos del sistema"""
    system_logger.info(
        f"Event: {event} | "
        f"Details: {details if details else 'No details provided'}"
    )
