"""
aasvd — compressão SVD ancorada e adaptativa de blocos transformer.

Módulos disponíveis:
  linalg      — fatoração SPD, fatores inversos, SVD truncada
  covariance  — acumulação em streaming de C = A·Bᵀ, S = B·Bᵀ, G = A·Aᵀ
  layerwise   — solver de camada em forma fechada (posto k) sob quatro objetivos, aritmética de posto
  toyformer   — bloco transformer pre-norm com forward/backward exatos
  refine      — refinamento de bloco com AdamW, warmup e cosseno
  pipeline    — compressão sequencial bloco a bloco, dados de calibração, arquivos de modelo
  metrics     — distorção MSE / cosseno, contabilidade, evolução do erro, registros de relatório
  container   — contêiner binário de matrizes, escrita atômica
  config      — configuração YAML/JSON e divisão de sementes
  report      — resumos Markdown, emissores CSV/JSON
  errors      — hierarquia de exceções
"""
