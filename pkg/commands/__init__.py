"""
Subcomandos de la línea de comandos

Cada módulo expone `add_parser(subparsers)` y registra su función `run`
como `handler`; `run(args)` devuelve el código de salida:
0 correcto, 1 fallo en ejecución, 2 error de configuración o snapshot.
"""

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
